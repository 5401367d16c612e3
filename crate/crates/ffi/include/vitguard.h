#ifndef VITGUARD_H
#define VITGUARD_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes; positive values match the command-line exit statuses.
 */
typedef enum VgStatus {
  VG_STATUS_OK = 0,
  VG_STATUS_CONFIG = 2,
  VG_STATUS_INPUT = 3,
  VG_STATUS_STATE = 4,
  VG_STATUS_DIMENSION = 5,
  VG_STATUS_EVALUATION = 6,
  VG_STATUS_FORMAT = 7,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  VG_STATUS_INVALID_ARGUMENT = 8,
  /**
   * Rust code panicked; the library state is still usable.
   */
  VG_STATUS_INTERNAL = 9,
} VgStatus;

/**
 * Trained ViT classifier.
 */
typedef struct VgClassifier VgClassifier;

/**
 * Calibrated detector pair (attention rollout and CLS) at one FPR.
 */
typedef struct VgDetector VgDetector;

/**
 * Trained masked autoencoder.
 */
typedef struct VgMae VgMae;

/**
 * Joint decision for one image.
 */
typedef struct VgVerdict {
  double d_attn;
  double d_cls;
  double tau_attn;
  double tau_cls;
  bool attn_fired;
  bool cls_fired;
  bool adversarial;
} VgVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *vg_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *vg_version(void);

/**
 * Loads a classifier checkpoint.
 *
 * # Safety
 * `path` must be null or nul-terminated; `out` must be null or writable.
 */
enum VgStatus vg_classifier_load(const char *path, struct VgClassifier **out);

/**
 * # Safety
 * `handle` must be null or come from [`vg_classifier_load`] and not have
 * been freed.
 */
void vg_classifier_free(struct VgClassifier *handle);

/**
 * Input geometry expected by the classifier.
 *
 * # Safety
 * `handle` must be a live classifier; the outputs must be writable.
 */
enum VgStatus vg_classifier_geometry(const struct VgClassifier *handle,
                                     size_t *height,
                                     size_t *width,
                                     size_t *channels);

/**
 * Predicted class of one image.
 *
 * # Safety
 * `pixels` must point to `len` doubles; `label` must be writable.
 */
enum VgStatus vg_classifier_predict(const struct VgClassifier *handle,
                                    const double *pixels,
                                    size_t len,
                                    size_t *label);

/**
 * Loads an MAE checkpoint.
 *
 * # Safety
 * As for [`vg_classifier_load`].
 */
enum VgStatus vg_mae_load(const char *path, struct VgMae **out);

/**
 * # Safety
 * `handle` must be null or come from [`vg_mae_load`] and not have been
 * freed.
 */
void vg_mae_free(struct VgMae *handle);

/**
 * Loads both detectors calibrated at `target_fpr` from a calibration file.
 *
 * # Safety
 * As for [`vg_classifier_load`].
 */
enum VgStatus vg_detector_load(const char *calibration, double target_fpr, struct VgDetector **out);

/**
 * # Safety
 * `handle` must be null or come from [`vg_detector_load`] and not have
 * been freed.
 */
void vg_detector_free(struct VgDetector *handle);

/**
 * Detection layer of a loaded detector pair.
 *
 * # Safety
 * `handle` must be a live detector; `layer` must be writable.
 */
enum VgStatus vg_detector_layer(const struct VgDetector *handle, size_t *layer);

/**
 * Runs the joint detector on one image. `seed` drives the reconstruction
 * mask; equal seeds give equal verdicts.
 *
 * # Safety
 * Handles must be live; `pixels` must point to `len` doubles; `verdict`
 * must be writable.
 */
enum VgStatus vg_detect(const struct VgDetector *detector,
                        const struct VgClassifier *classifier,
                        const struct VgMae *mae,
                        const double *pixels,
                        size_t len,
                        uint64_t seed,
                        struct VgVerdict *verdict);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITGUARD_H */
