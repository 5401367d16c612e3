//! C ABI for loading trained models and calibrations and running the joint
//! detector on single images.
//!
//! Every fallible function returns a [`VgStatus`]; on failure the message
//! is available from [`vg_last_error`] on the same thread. Objects are
//! opaque handles created by `*_load` and released by the matching `*_free`.
//! Images are passed as `height × width × channels` row-major `double`
//! buffers with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vitguard::detectors::{joint_detect, CalibrationArtifact, Detector, DetectorId, Feature};
use vitguard::image::Image;
use vitguard::mae::MaeModel;
use vitguard::rng;
use vitguard::vit::{predict_one, ClassifierModel};
use vitguard::Error;

/// Status codes; positive values match the command-line exit statuses.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VgStatus {
    Ok = 0,
    Config = 2,
    Input = 3,
    State = 4,
    Dimension = 5,
    Evaluation = 6,
    Format = 7,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 8,
    /// Rust code panicked; the library state is still usable.
    Internal = 9,
}

impl From<&Error> for VgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => VgStatus::Config,
            Error::Input(_) => VgStatus::Input,
            Error::State(_) => VgStatus::State,
            Error::Dimension(_) => VgStatus::Dimension,
            Error::Evaluation(_) => VgStatus::Evaluation,
            Error::Format(_) | Error::Io { .. } => VgStatus::Format,
        }
    }
}

/// Trained ViT classifier.
pub struct VgClassifier(ClassifierModel);

/// Trained masked autoencoder.
pub struct VgMae(MaeModel);

/// Calibrated detector pair (attention rollout and CLS) at one FPR.
pub struct VgDetector {
    attn: Detector,
    cls: Detector,
}

/// Joint decision for one image.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VgVerdict {
    pub d_attn: f64,
    pub d_cls: f64,
    pub tau_attn: f64,
    pub tau_cls: f64,
    pub attn_fired: bool,
    pub cls_fired: bool,
    pub adversarial: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VgStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            VgStatus::from(&e)
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            VgStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            VgStatus::Internal
        }
    }
}

fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller passes either null or a live handle from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller passes either null or a writable location.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::Arg(format!("{name} is null")))
}

fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{name} is null")));
    }
    // SAFETY: non-null and nul-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn image_arg(
    pixels: *const f64,
    len: usize,
    geometry: (usize, usize, usize),
) -> Result<Image, Failure> {
    if pixels.is_null() {
        return Err(Failure::Arg("pixels is null".into()));
    }
    let (h, w, c) = geometry;
    if len != h * w * c {
        return Err(Error::Dimension(format!(
            "expected {h}×{w}×{c} = {} values, got {len}",
            h * w * c
        ))
        .into());
    }
    // SAFETY: the caller guarantees `len` readable doubles at `pixels`.
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 1]".into()).into());
    }
    Ok(Image::from_vec(h, w, c, data)?)
}

fn boxed<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    *out_ptr(out, "out")? = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn vg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a classifier checkpoint.
///
/// # Safety
/// `path` must be null or nul-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn vg_classifier_load(
    path: *const c_char,
    out: *mut *mut VgClassifier,
) -> VgStatus {
    guard(|| {
        let model = ClassifierModel::load(path_arg(path, "path")?)?;
        boxed(out, VgClassifier(model))
    })
}

/// # Safety
/// `handle` must be null or come from [`vg_classifier_load`] and not have
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn vg_classifier_free(handle: *mut VgClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input geometry expected by the classifier.
///
/// # Safety
/// `handle` must be a live classifier; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn vg_classifier_geometry(
    handle: *const VgClassifier,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> VgStatus {
    guard(|| {
        let (h, w, c) = arg(handle, "handle")?.0.config().geometry();
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        *out_ptr(channels, "channels")? = c;
        Ok(())
    })
}

/// Predicted class of one image.
///
/// # Safety
/// `pixels` must point to `len` doubles; `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vg_classifier_predict(
    handle: *const VgClassifier,
    pixels: *const f64,
    len: usize,
    label: *mut usize,
) -> VgStatus {
    guard(|| {
        let model = &arg(handle, "handle")?.0;
        let x = image_arg(pixels, len, model.config().geometry())?;
        *out_ptr(label, "label")? = predict_one(model, &x)?;
        Ok(())
    })
}

/// Loads an MAE checkpoint.
///
/// # Safety
/// As for [`vg_classifier_load`].
#[no_mangle]
pub unsafe extern "C" fn vg_mae_load(path: *const c_char, out: *mut *mut VgMae) -> VgStatus {
    guard(|| {
        let mae = MaeModel::load(path_arg(path, "path")?)?;
        boxed(out, VgMae(mae))
    })
}

/// # Safety
/// `handle` must be null or come from [`vg_mae_load`] and not have been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn vg_mae_free(handle: *mut VgMae) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads both detectors calibrated at `target_fpr` from a calibration file.
///
/// # Safety
/// As for [`vg_classifier_load`].
#[no_mangle]
pub unsafe extern "C" fn vg_detector_load(
    calibration: *const c_char,
    target_fpr: f64,
    out: *mut *mut VgDetector,
) -> VgStatus {
    guard(|| {
        let artifact = CalibrationArtifact::load(path_arg(calibration, "calibration")?)?;
        let attn = artifact.detector(Feature::Attention, target_fpr)?;
        let cls = artifact.detector(Feature::Cls, target_fpr)?;
        boxed(out, VgDetector { attn, cls })
    })
}

/// # Safety
/// `handle` must be null or come from [`vg_detector_load`] and not have
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn vg_detector_free(handle: *mut VgDetector) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Detection layer of a loaded detector pair.
///
/// # Safety
/// `handle` must be a live detector; `layer` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vg_detector_layer(
    handle: *const VgDetector,
    layer: *mut usize,
) -> VgStatus {
    guard(|| {
        *out_ptr(layer, "layer")? = arg(handle, "handle")?.attn.config.layer;
        Ok(())
    })
}

/// Runs the joint detector on one image. `seed` drives the reconstruction
/// mask; equal seeds give equal verdicts.
///
/// # Safety
/// Handles must be live; `pixels` must point to `len` doubles; `verdict`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn vg_detect(
    detector: *const VgDetector,
    classifier: *const VgClassifier,
    mae: *const VgMae,
    pixels: *const f64,
    len: usize,
    seed: u64,
    verdict: *mut VgVerdict,
) -> VgStatus {
    guard(|| {
        let det = arg(detector, "detector")?;
        let model = &arg(classifier, "classifier")?.0;
        let mae = &arg(mae, "mae")?.0;
        let x = image_arg(pixels, len, model.config().geometry())?;
        let mut rng = rng::stream(seed, 0);
        let v = joint_detect(&x, model, mae, &det.attn, &det.cls, &mut rng)?;
        *out_ptr(verdict, "verdict")? = VgVerdict {
            d_attn: v.d_attn.unwrap_or(f64::NAN),
            d_cls: v.d_cls.unwrap_or(f64::NAN),
            tau_attn: det.attn.threshold()?.tau,
            tau_cls: det.cls.threshold()?.tau,
            attn_fired: v.triggered_by.contains(&DetectorId::I),
            cls_fired: v.triggered_by.contains(&DetectorId::II),
            adversarial: v.adversarial,
        };
        Ok(())
    })
}
