//! Reconstruction-based detectors.
//!
//! Detector I compares the CLS attention-rollout vectors of an input and its
//! MAE reconstruction at one layer; detector II compares the CLS
//! representations at the same layer. Either fires when its distance is
//! strictly greater than a threshold calibrated on clean data, and the joint
//! detector is their OR.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::fgsm;
use crate::container::write_atomic;
use crate::error::{config_err, input_err, Error, Result};
use crate::eval::{roc_auc, ScoreSample};
use crate::image::{Image, LabeledDataset};
use crate::mae::{reconstruct, saliency_from_trace, sample_mask, MaeModel, MaskStrategy};
use crate::rng::{stream, StageRng};
use crate::rollout::cls_attention_all_layers;
use crate::vit::{ClassifierModel, TransformerTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Attention,
    Cls,
}

impl Feature {
    pub fn detector_id(self) -> DetectorId {
        match self {
            Feature::Attention => DetectorId::I,
            Feature::Cls => DetectorId::II,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// One MAE pass over a single mask.
    Half,
    /// Two passes over complementary masks (ratio 0.5 only).
    Full,
}

impl std::str::FromStr for RecoveryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half" => Ok(Self::Half),
            "full" => Ok(Self::Full),
            other => config_err(format!("unknown recovery mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorId {
    I,
    II,
}

/// How the reconstruction `x′` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionPolicy {
    pub recovery_mode: RecoveryMode,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
}

impl Default for ReconstructionPolicy {
    fn default() -> Self {
        Self {
            recovery_mode: RecoveryMode::Half,
            mask_ratio: 0.5,
            mask_strategy: MaskStrategy::Random,
        }
    }
}

impl ReconstructionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return config_err(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.recovery_mode == RecoveryMode::Full && self.mask_ratio != 0.5 {
            return config_err("full recovery needs mask ratio 0.5");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub feature: Feature,
    pub layer: usize,
    #[serde(flatten)]
    pub policy: ReconstructionPolicy,
}

impl DetectorConfig {
    pub fn new(feature: Feature, layer: usize, policy: ReconstructionPolicy) -> Self {
        Self {
            feature,
            layer,
            policy,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_layer(self.layer, num_layers)?;
        self.policy.validate()
    }
}

fn check_layer(layer: usize, num_layers: usize) -> Result<()> {
    if layer >= num_layers {
        return config_err(format!("layer {layer} outside [0, {num_layers})"));
    }
    Ok(())
}

/// `x′` for `x`, following `policy`. Saliency-driven masks use the rollout
/// of `trace_x`.
pub fn reconstruct_input(
    mae: &MaeModel,
    x: &Image,
    trace_x: &TransformerTrace,
    policy: &ReconstructionPolicy,
    rng: &mut StageRng,
) -> Result<Image> {
    policy.validate()?;
    let saliency = match policy.mask_strategy {
        MaskStrategy::Random => None,
        _ => Some(saliency_from_trace(trace_x)?),
    };
    let first = sample_mask(
        mae.num_patches(),
        policy.mask_ratio,
        policy.mask_strategy,
        rng,
        saliency.as_deref(),
    )?;
    let once = reconstruct(mae, x, &first)?.x_prime;
    match policy.recovery_mode {
        RecoveryMode::Half => Ok(once),
        RecoveryMode::Full => Ok(reconstruct(mae, &once, &first.complement())?.x_prime),
    }
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// `d_attn = ‖attn_l(x) − attn_l(x′)‖₂` over the full CLS rollout row.
pub fn score_attn(
    trace_x: &TransformerTrace,
    trace_xp: &TransformerTrace,
    layer: usize,
) -> Result<f64> {
    check_layer(layer, trace_x.num_layers().min(trace_xp.num_layers()))?;
    let a = cls_attention_all_layers(trace_x)?;
    let b = cls_attention_all_layers(trace_xp)?;
    Ok(l2(a[layer].as_slice(), b[layer].as_slice()))
}

/// `d_cls = ‖cls_l(x) − cls_l(x′)‖₂`.
pub fn score_cls(
    trace_x: &TransformerTrace,
    trace_xp: &TransformerTrace,
    layer: usize,
) -> Result<f64> {
    check_layer(layer, trace_x.num_layers().min(trace_xp.num_layers()))?;
    let (a, b) = (&trace_x.cls_reps[layer], &trace_xp.cls_reps[layer]);
    Ok(l2(a.as_slice().unwrap(), b.as_slice().unwrap()))
}

/// Both distances at every layer for one `(x, x′)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub attn: Vec<f64>,
    pub cls: Vec<f64>,
}

impl LayerScores {
    pub fn from_traces(trace_x: &TransformerTrace, trace_xp: &TransformerTrace) -> Result<Self> {
        let a = cls_attention_all_layers(trace_x)?;
        let b = cls_attention_all_layers(trace_xp)?;
        let attn = a
            .iter()
            .zip(&b)
            .map(|(u, v)| l2(u.as_slice(), v.as_slice()))
            .collect();
        let cls = trace_x
            .cls_reps
            .iter()
            .zip(&trace_xp.cls_reps)
            .map(|(u, v)| l2(u.as_slice().unwrap(), v.as_slice().unwrap()))
            .collect();
        Ok(Self { attn, cls })
    }

    pub fn get(&self, feature: Feature, layer: usize) -> Result<f64> {
        let v = match feature {
            Feature::Attention => &self.attn,
            Feature::Cls => &self.cls,
        };
        check_layer(layer, v.len())?;
        Ok(v[layer])
    }
}

/// Reconstructs `x` once and scores it at every layer.
pub fn input_scores(
    model: &ClassifierModel,
    mae: &MaeModel,
    x: &Image,
    policy: &ReconstructionPolicy,
    rng: &mut StageRng,
) -> Result<LayerScores> {
    let trace_x = model.forward(x)?;
    let xp = reconstruct_input(mae, x, &trace_x, policy, rng)?;
    LayerScores::from_traces(&trace_x, &model.forward(&xp)?)
}

/// Scores a set of images in parallel; image `i` masks with stream `i` of
/// `seed`.
pub fn score_images(
    model: &ClassifierModel,
    mae: &MaeModel,
    images: &[Image],
    policy: &ReconstructionPolicy,
    seed: u64,
) -> Result<Vec<LayerScores>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| input_scores(model, mae, x, policy, &mut stream(seed, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub target_fpr: f64,
    pub calibration_size: usize,
    /// Fewer than `1/target_fpr` calibration scores: the target cannot be
    /// resolved and the threshold is only nominal.
    pub vacuous: bool,
}

impl Threshold {
    /// Adversarial iff `score > tau`.
    pub fn exceeds(&self, score: f64) -> bool {
        score > self.tau
    }

    /// A hand-set threshold.
    pub fn fixed(tau: f64) -> Self {
        Self {
            tau,
            target_fpr: f64::NAN,
            calibration_size: 0,
            vacuous: true,
        }
    }
}

/// The smallest clean score `tau` whose strictly-greater fraction is at most
/// `target_fpr`.
pub fn calibrate_threshold(clean_scores: &[f64], target_fpr: f64) -> Result<Threshold> {
    if clean_scores.is_empty() {
        return input_err("no clean scores to calibrate on");
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return config_err(format!("target FPR {target_fpr} outside (0, 1)"));
    }
    if clean_scores.iter().any(|s| !s.is_finite()) {
        return input_err("calibration scores must be finite");
    }
    let n = clean_scores.len();
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Tolerate representation error in target·n (0.07·100 = 7.000000000000001).
    let allowed = (target_fpr * n as f64 * (1.0 + 1e-12)).floor() as usize;
    let mut i = 0;
    let tau = loop {
        let v = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == v {
            j += 1;
        }
        if n - j <= allowed {
            break v;
        }
        i = j;
    };
    Ok(Threshold {
        tau,
        target_fpr,
        calibration_size: n,
        vacuous: (n as f64) * target_fpr < 1.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub d_attn: Option<f64>,
    pub d_cls: Option<f64>,
    pub adversarial: bool,
    pub triggered_by: Vec<DetectorId>,
}

/// A detector configuration plus its calibrated threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    threshold: Option<Threshold>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        Self {
            config,
            threshold: None,
        }
    }

    pub fn with_threshold(config: DetectorConfig, threshold: Threshold) -> Self {
        Self {
            config,
            threshold: Some(threshold),
        }
    }

    pub fn calibrate(&mut self, clean_scores: &[f64], target_fpr: f64) -> Result<Threshold> {
        let t = calibrate_threshold(clean_scores, target_fpr)?;
        self.threshold = Some(t);
        Ok(t)
    }

    pub fn threshold(&self) -> Result<&Threshold> {
        self.threshold
            .as_ref()
            .ok_or_else(|| Error::State("detector has not been calibrated".into()))
    }

    pub fn id(&self) -> DetectorId {
        self.config.feature.detector_id()
    }

    pub fn detect(
        &self,
        x: &Image,
        model: &ClassifierModel,
        mae: &MaeModel,
        rng: &mut StageRng,
    ) -> Result<DetectionVerdict> {
        let t = *self.threshold()?;
        self.config.validate(model.num_layers())?;
        let scores = input_scores(model, mae, x, &self.config.policy, rng)?;
        let s = scores.get(self.config.feature, self.config.layer)?;
        let fired = t.exceeds(s);
        let (d_attn, d_cls) = match self.config.feature {
            Feature::Attention => (Some(s), None),
            Feature::Cls => (None, Some(s)),
        };
        Ok(DetectionVerdict {
            d_attn,
            d_cls,
            adversarial: fired,
            triggered_by: if fired { vec![self.id()] } else { vec![] },
        })
    }
}

/// OR rule over the two detectors' decisions.
pub fn joint_verdict(
    d_attn: f64,
    tau_i: &Threshold,
    d_cls: f64,
    tau_ii: &Threshold,
) -> DetectionVerdict {
    let mut triggered_by = Vec::new();
    if tau_i.exceeds(d_attn) {
        triggered_by.push(DetectorId::I);
    }
    if tau_ii.exceeds(d_cls) {
        triggered_by.push(DetectorId::II);
    }
    DetectionVerdict {
        d_attn: Some(d_attn),
        d_cls: Some(d_cls),
        adversarial: !triggered_by.is_empty(),
        triggered_by,
    }
}

/// Joint decision for precomputed scores.
pub fn joint_from_scores(
    scores: &LayerScores,
    det_i: &Detector,
    det_ii: &Detector,
) -> Result<DetectionVerdict> {
    let (ti, tii) = (det_i.threshold()?, det_ii.threshold()?);
    let a = scores.get(det_i.config.feature, det_i.config.layer)?;
    let c = scores.get(det_ii.config.feature, det_ii.config.layer)?;
    Ok(joint_verdict(a, ti, c, tii))
}

/// Runs both detectors on one shared reconstruction.
pub fn joint_detect(
    x: &Image,
    model: &ClassifierModel,
    mae: &MaeModel,
    det_i: &Detector,
    det_ii: &Detector,
    rng: &mut StageRng,
) -> Result<DetectionVerdict> {
    check_pair(det_i, det_ii, model.num_layers())?;
    let scores = input_scores(model, mae, x, &det_i.config.policy, rng)?;
    joint_from_scores(&scores, det_i, det_ii)
}

pub(crate) fn check_pair(det_i: &Detector, det_ii: &Detector, num_layers: usize) -> Result<()> {
    det_i.threshold()?;
    det_ii.threshold()?;
    det_i.config.validate(num_layers)?;
    det_ii.config.validate(num_layers)?;
    if det_i.config.feature != Feature::Attention || det_ii.config.feature != Feature::Cls {
        return config_err("joint detection pairs an attention detector with a CLS detector");
    }
    if det_i.config.policy != det_ii.config.policy {
        return config_err("joint detectors must share one reconstruction policy");
    }
    Ok(())
}

/// Index of the largest value; ties go to the smaller index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Per-layer detector-I AUC from clean and adversarial scores and the best
/// layer.
pub fn select_layer_from_scores(
    clean: &[LayerScores],
    adversarial: &[LayerScores],
) -> Result<(usize, Vec<f64>)> {
    if adversarial.is_empty() {
        return Err(Error::Evaluation(
            "no successful adversarial samples".into(),
        ));
    }
    let layers = clean
        .first()
        .ok_or_else(|| Error::Evaluation("no clean samples".into()))?
        .attn
        .len();
    let aucs = (0..layers)
        .map(|l| {
            let samples: Vec<ScoreSample> = clean
                .iter()
                .map(|s| ScoreSample::new(s.attn[l], false))
                .chain(
                    adversarial
                        .iter()
                        .map(|s| ScoreSample::new(s.attn[l], true)),
                )
                .collect();
            roc_auc(&samples)
        })
        .collect::<Result<Vec<_>>>()?;
    let layer = argmax_first(&aucs).expect("at least one layer");
    Ok((layer, aucs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub aucs: Vec<f64>,
    pub num_adversarial: usize,
}

/// Picks the layer whose detector-I AUC against FGSM is highest on a
/// validation set.
pub fn select_layer(
    model: &ClassifierModel,
    mae: &MaeModel,
    validation: &LabeledDataset,
    fgsm_eps: f64,
    policy: &ReconstructionPolicy,
    seed: u64,
) -> Result<LayerSelection> {
    if model.num_layers() == 1 {
        return Ok(LayerSelection {
            layer: 0,
            aucs: vec![],
            num_adversarial: 0,
        });
    }
    let pairs: Vec<(usize, &Image, usize)> = validation
        .iter()
        .enumerate()
        .map(|(i, (x, y))| (i, x, y))
        .collect();
    let per_sample = pairs
        .par_iter()
        .map(|&(i, x, y)| {
            let clean = input_scores(model, mae, x, policy, &mut stream(seed, 2 * i as u64))?;
            let ok = crate::vit::predict_one(model, x)? == y;
            let adv = fgsm(model, x, y, fgsm_eps)?;
            let adv_scores = if ok && crate::vit::predict_one(model, &adv)? != y {
                Some(input_scores(
                    model,
                    mae,
                    &adv,
                    policy,
                    &mut stream(seed, 2 * i as u64 + 1),
                )?)
            } else {
                None
            };
            Ok((clean, adv_scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let clean: Vec<LayerScores> = per_sample.iter().map(|(c, _)| c.clone()).collect();
    let adv: Vec<LayerScores> = per_sample.into_iter().filter_map(|(_, a)| a).collect();
    let (layer, aucs) = select_layer_from_scores(&clean, &adv)?;
    Ok(LayerSelection {
        layer,
        aucs,
        num_adversarial: adv.len(),
    })
}

/// One calibrated detector as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub feature: Feature,
    pub layer: usize,
    pub ratio: f64,
    pub recovery_mode: RecoveryMode,
    pub mask_strategy: MaskStrategy,
    pub tau: f64,
    pub target_fpr: f64,
    pub calibration_size: usize,
    pub vacuous: bool,
}

impl CalibrationRecord {
    pub fn new(config: &DetectorConfig, threshold: &Threshold) -> Self {
        Self {
            feature: config.feature,
            layer: config.layer,
            ratio: config.policy.mask_ratio,
            recovery_mode: config.policy.recovery_mode,
            mask_strategy: config.policy.mask_strategy,
            tau: threshold.tau,
            target_fpr: threshold.target_fpr,
            calibration_size: threshold.calibration_size,
            vacuous: threshold.vacuous,
        }
    }

    pub fn detector(&self) -> Detector {
        let config = DetectorConfig::new(
            self.feature,
            self.layer,
            ReconstructionPolicy {
                recovery_mode: self.recovery_mode,
                mask_ratio: self.ratio,
                mask_strategy: self.mask_strategy,
            },
        );
        Detector::with_threshold(
            config,
            Threshold {
                tau: self.tau,
                target_fpr: self.target_fpr,
                calibration_size: self.calibration_size,
                vacuous: self.vacuous,
            },
        )
    }
}

/// Calibration file: selected layer, per-layer selection AUCs and every
/// calibrated detector, with the originating configuration echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub schema_version: u32,
    pub config: String,
    pub layer: usize,
    pub layer_aucs: Vec<f64>,
    pub records: Vec<CalibrationRecord>,
}

impl CalibrationArtifact {
    pub fn detector(&self, feature: Feature, target_fpr: f64) -> Result<Detector> {
        self.records
            .iter()
            .find(|r| r.feature == feature && r.target_fpr == target_fpr)
            .map(CalibrationRecord::detector)
            .ok_or_else(|| {
                Error::State(format!(
                    "no calibrated {feature:?} detector at FPR {target_fpr}"
                ))
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("calibration file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
