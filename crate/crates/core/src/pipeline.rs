//! Command implementations behind the `vitguard` binary.
//!
//! Every command reads a [`LoadedConfig`], writes its artifacts under an
//! output directory and is deterministic given the configuration and seeds.
//!
//! | artifact | writer |
//! |---|---|
//! | `vit.ckpt`, `train_vit_log.jsonl` | [`train_vit`] |
//! | `surrogate.ckpt`, `train_surrogate_log.jsonl` | [`train_vit`] with `surrogate` |
//! | `mae.ckpt`, `train_mae_log.jsonl` | [`train_mae`] |
//! | `adv_<attack>.vgct` | [`attack`] |
//! | `calibration.json` | [`calibrate`] |
//! | `detections.jsonl` | [`detect`] |
//! | `report.json`, `scores.jsonl`, `roc_*.csv` | [`evaluate`] |

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{generate_batch, AdversarialBatch, AttackConfig, AttackContext};
use crate::config::{LoadedConfig, PipelineConfig};
use crate::container::write_atomic;
use crate::data::{load_png, Split};
use crate::detectors::{
    calibrate_threshold, joint_from_scores, score_images, select_layer, CalibrationArtifact,
    CalibrationRecord, DetectionVerdict, DetectorConfig, Feature, LayerScores,
};
use crate::error::{config_err, Error, Result};
use crate::eval::{run_experiment, write_outputs, Experiment, ExperimentSeeds, OutputPaths};
use crate::image::{Image, LabeledDataset};
use crate::mae::{train_mae_logged, MaeModel};
use crate::vit::{accuracy, train_classifier_logged, ClassifierModel, EpochLog, TrainSpec};

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
/// Target FPRs calibrated by [`calibrate`].
pub const CALIBRATION_TARGETS: [f64; 2] = [0.01, 0.05];

pub fn vit_path(out: &Path) -> PathBuf {
    out.join("vit.ckpt")
}

pub fn surrogate_path(out: &Path) -> PathBuf {
    out.join("surrogate.ckpt")
}

pub fn mae_path(out: &Path) -> PathBuf {
    out.join("mae.ckpt")
}

pub fn calibration_path(out: &Path) -> PathBuf {
    out.join("calibration.json")
}

pub fn archive_path(out: &Path, attack: &str) -> PathBuf {
    out.join(format!("adv_{attack}.vgct"))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return config_err(format!("{what} {} not found", path.display()));
    }
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    require(path, "classifier checkpoint")?;
    ClassifierModel::load(path)
}

pub fn load_mae(path: &Path) -> Result<MaeModel> {
    require(path, "MAE checkpoint")?;
    MaeModel::load(path)
}

fn write_log(path: &Path, echo: &str, logs: &[EpochLog]) -> Result<()> {
    let mut text = serde_json::json!({ "config": echo }).to_string();
    text.push('\n');
    for l in logs {
        text.push_str(&serde_json::to_string(l).expect("serializable"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn with_seed(spec: &TrainSpec, seed: u64) -> TrainSpec {
    TrainSpec {
        seed,
        ..spec.clone()
    }
}

/// Trains the classifier (or the transfer surrogate) on the train split.
/// The stage seed from `seeds` replaces any seed in the train section.
pub fn train_vit(cfg: &LoadedConfig, out: &Path, surrogate: bool) -> Result<PathBuf> {
    let c = &cfg.config;
    let train = c.dataset(Split::Train)?;
    let (model_cfg, seed, name) = if surrogate {
        (c.surrogate_config(), c.seeds.train_surrogate, "surrogate")
    } else {
        (c.model.clone(), c.seeds.train_vit, "vit")
    };
    let mut logs = Vec::new();
    let model = train_classifier_logged(&train, &model_cfg, &with_seed(&c.train_vit, seed), |l| {
        logs.push(l.clone())
    })?;
    ensure_dir(out)?;
    let path = out.join(format!("{name}.ckpt"));
    model.save_with_echo(&path, &cfg.echo)?;
    write_log(
        &out.join(format!("train_{name}_log.jsonl")),
        &cfg.echo,
        &logs,
    )?;
    Ok(path)
}

/// Trains the MAE on clean training images only.
pub fn train_mae(cfg: &LoadedConfig, out: &Path) -> Result<PathBuf> {
    let c = &cfg.config;
    let train = c.dataset(Split::Train)?;
    let mut logs = Vec::new();
    let mae = train_mae_logged(
        train.images(),
        &c.mae,
        &with_seed(&c.train_mae, c.seeds.train_mae),
        |l| logs.push(l.clone()),
    )?;
    ensure_dir(out)?;
    let path = mae_path(out);
    mae.save_with_echo(&path, &cfg.echo)?;
    write_log(&out.join("train_mae_log.jsonl"), &cfg.echo, &logs)?;
    Ok(path)
}

fn capped(data: LabeledDataset, cap: Option<usize>) -> LabeledDataset {
    match cap {
        Some(n) => data.take(n),
        None => data,
    }
}

fn find_attack<'a>(c: &'a PipelineConfig, name: &str) -> Result<&'a AttackConfig> {
    c.attacks.iter().find(|a| a.name() == name).ok_or_else(|| {
        let known: Vec<&str> = c.attacks.iter().map(|a| a.name()).collect();
        Error::Config(format!("attack `{name}` not in the grid {known:?}"))
    })
}

struct Models {
    vit: ClassifierModel,
    surrogate: Option<ClassifierModel>,
    mae: Option<MaeModel>,
}

fn models_for(out: &Path, attacks: &[&AttackConfig], need_mae: bool) -> Result<Models> {
    let vit = load_classifier(&vit_path(out))?;
    let surrogate = if attacks
        .iter()
        .any(|a| matches!(a, AttackConfig::Transfer(_)))
    {
        Some(load_classifier(&surrogate_path(out))?)
    } else {
        None
    };
    let mae = if need_mae
        || attacks
            .iter()
            .any(|a| matches!(a, AttackConfig::AdaptiveCw(_)))
    {
        Some(load_mae(&mae_path(out))?)
    } else {
        None
    };
    Ok(Models {
        vit,
        surrogate,
        mae,
    })
}

impl Models {
    fn context(&self) -> AttackContext<'_> {
        AttackContext {
            model: &self.vit,
            surrogate: self.surrogate.as_ref(),
            mae: self.mae.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: String,
    pub archive: PathBuf,
    pub attempted: usize,
    pub successful: usize,
    pub success_rate: f64,
}

/// Attacks the (capped) test split and archives every sample with its
/// success flag.
pub fn attack(cfg: &LoadedConfig, out: &Path, name: &str) -> Result<AttackSummary> {
    let c = &cfg.config;
    let attack = find_attack(c, name)?;
    let models = models_for(out, &[attack], false)?;
    let test = capped(c.dataset(Split::Test)?, c.eval.test_samples);
    let batch = generate_batch(
        attack,
        &models.context(),
        test.images(),
        test.labels(),
        c.seeds.attack,
    )?;
    ensure_dir(out)?;
    let path = archive_path(out, name);
    batch.save(&path, &cfg.echo)?;
    Ok(summarize(&batch, path))
}

fn summarize(batch: &AdversarialBatch, archive: PathBuf) -> AttackSummary {
    AttackSummary {
        attack: batch.attack.clone(),
        archive,
        attempted: batch.len(),
        successful: batch.success.iter().filter(|&&s| s).count(),
        success_rate: batch.success_rate(),
    }
}

/// Layer selection against FGSM on validation data, then thresholds for
/// both detectors at every target in [`CALIBRATION_TARGETS`].
pub fn calibrate_models(
    c: &PipelineConfig,
    echo: &str,
    model: &ClassifierModel,
    mae: &MaeModel,
    validation: &LabeledDataset,
) -> Result<CalibrationArtifact> {
    let d = &c.detector;
    let (layer, layer_aucs) = match d.layer {
        Some(l) => (l, Vec::new()),
        None => {
            let sel = capped(validation.clone(), d.selection_samples);
            let s = select_layer(
                model,
                mae,
                &sel,
                d.selection_eps,
                &d.policy,
                c.seeds.calibrate ^ 0x005e_1ec7,
            )?;
            (s.layer, s.aucs)
        }
    };
    let cal = capped(validation.clone(), d.calibration_samples);
    let scores = score_images(model, mae, cal.images(), &d.policy, c.seeds.calibrate)?;
    let mut records = Vec::new();
    for feature in [Feature::Attention, Feature::Cls] {
        let clean: Vec<f64> = scores
            .iter()
            .map(|s| s.get(feature, layer))
            .collect::<Result<_>>()?;
        for target in CALIBRATION_TARGETS {
            let t = calibrate_threshold(&clean, target)?;
            records.push(CalibrationRecord::new(
                &DetectorConfig::new(feature, layer, d.policy),
                &t,
            ));
        }
    }
    Ok(CalibrationArtifact {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        config: echo.to_string(),
        layer,
        layer_aucs,
        records,
    })
}

pub fn calibrate(cfg: &LoadedConfig, out: &Path) -> Result<CalibrationArtifact> {
    let c = &cfg.config;
    let model = load_classifier(&vit_path(out))?;
    let mae = load_mae(&mae_path(out))?;
    let validation = c.dataset(Split::Validation)?;
    let artifact = calibrate_models(c, &cfg.echo, &model, &mae, &validation)?;
    ensure_dir(out)?;
    artifact.save(&calibration_path(out))?;
    Ok(artifact)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub input: String,
    pub index: usize,
    pub verdict: DetectionVerdict,
}

/// Reads PNG files and adversarial archives (`.vgct`, adversarial images
/// only) into `(source, index, image)` triples.
pub fn read_inputs(
    paths: &[PathBuf],
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<(String, usize, Image)>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_file() {
            return Err(Error::Input(format!("input {} not found", p.display())));
        }
        let name = p.display().to_string();
        if p.extension().is_some_and(|e| e == "vgct") {
            let (batch, _) = AdversarialBatch::load(p)?;
            out.extend(
                batch
                    .adversarials
                    .into_iter()
                    .enumerate()
                    .map(|(i, x)| (name.clone(), i, x)),
            );
        } else {
            out.push((name, 0, load_png(p, height, width, channels)?));
        }
    }
    Ok(out)
}

/// Joint detection of every input at `target_fpr` using `calibration.json`.
pub fn detect(
    cfg: &LoadedConfig,
    out: &Path,
    inputs: &[PathBuf],
    target_fpr: f64,
) -> Result<Vec<DetectionRecord>> {
    let c = &cfg.config;
    let model = load_classifier(&vit_path(out))?;
    let mae = load_mae(&mae_path(out))?;
    let cal_path = calibration_path(out);
    if !cal_path.is_file() {
        return Err(Error::State(format!(
            "no calibration at {}; run `calibrate` first",
            cal_path.display()
        )));
    }
    let artifact = CalibrationArtifact::load(&cal_path)?;
    let det_i = artifact.detector(Feature::Attention, target_fpr)?;
    let det_ii = artifact.detector(Feature::Cls, target_fpr)?;
    let (h, w, ch) = c.model.geometry();
    let items = read_inputs(inputs, h, w, ch)?;
    let images: Vec<Image> = items.iter().map(|(_, _, x)| x.clone()).collect();
    let scores: Vec<LayerScores> =
        score_images(&model, &mae, &images, &det_i.config.policy, c.seeds.detect)?;
    let records = items
        .par_iter()
        .zip(scores.par_iter())
        .map(|((src, i, _), s)| {
            Ok(DetectionRecord {
                input: src.clone(),
                index: *i,
                verdict: joint_from_scores(s, &det_i, &det_ii)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write_atomic(&out.join("detections.jsonl"), text.as_bytes())?;
    Ok(records)
}

/// Runs the attack grid on the test split and writes the report.
pub fn evaluate(cfg: &LoadedConfig, out: &Path) -> Result<OutputPaths> {
    let c = &cfg.config;
    let attacks: Vec<&AttackConfig> = c.attacks.iter().collect();
    let models = models_for(out, &attacks, true)?;
    let layer = match c.detector.layer {
        Some(l) => l,
        None => {
            let p = calibration_path(out);
            if !p.is_file() {
                return Err(Error::State(format!(
                    "no detector.layer configured and no calibration at {}; run `calibrate` first",
                    p.display()
                )));
            }
            CalibrationArtifact::load(&p)?.layer
        }
    };
    let test = capped(c.dataset(Split::Test)?, c.eval.test_samples);
    let exp = Experiment {
        model: &models.vit,
        mae: models.mae.as_ref().expect("loaded above"),
        surrogate: models.surrogate.as_ref(),
        test: &test,
        attacks: &c.attacks,
        layer,
        policy: c.detector.policy,
        seeds: ExperimentSeeds {
            attack: c.seeds.attack,
            detect: c.seeds.detect,
        },
        config_echo: cfg.echo.clone(),
    };
    let output = run_experiment(&exp)?;
    ensure_dir(out)?;
    write_outputs(&output, out)
}

/// Test-split accuracy of the trained classifier.
pub fn test_accuracy(cfg: &LoadedConfig, out: &Path) -> Result<f64> {
    let model = load_classifier(&vit_path(out))?;
    accuracy(&model, &cfg.config.dataset(Split::Test)?)
}
