//! Pipeline configuration: TOML with dotted keys plus environment overrides.
//!
//! Any key can be overridden with `VITGUARD_<SECTION>__<KEY>=<value>`
//! (double underscore separates path segments, case-insensitive); a
//! top-level key drops the section, e.g. `VITGUARD_OUT_DIR`. Values are
//! parsed as TOML and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attacks::AttackConfig;
use crate::data::{DatasetManifest, Split, SyntheticSpec};
use crate::detectors::ReconstructionPolicy;
use crate::error::{config_err, Error, Result};
use crate::image::LabeledDataset;
use crate::mae::MaeConfig;
use crate::vit::{ModelConfig, TrainSpec};

pub const ENV_PREFIX: &str = "VITGUARD_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Manifest { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

/// One seed per stochastic stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub train_vit: u64,
    pub train_surrogate: u64,
    pub train_mae: u64,
    pub attack: u64,
    pub calibrate: u64,
    pub detect: u64,
}

impl Seeds {
    /// Every stage seed shifted by `base` (the `--seed` flag).
    pub fn offset(self, base: u64) -> Self {
        Self {
            data: self.data.wrapping_add(base),
            train_vit: self.train_vit.wrapping_add(base),
            train_surrogate: self.train_surrogate.wrapping_add(base),
            train_mae: self.train_mae.wrapping_add(base),
            attack: self.attack.wrapping_add(base),
            calibrate: self.calibrate.wrapping_add(base),
            detect: self.detect.wrapping_add(base),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    #[serde(flatten)]
    pub policy: ReconstructionPolicy,
    /// Fixed layer; selected automatically against FGSM when absent.
    pub layer: Option<usize>,
    pub selection_eps: f64,
    /// Caps on the validation samples used for selection and calibration.
    pub selection_samples: Option<usize>,
    pub calibration_samples: Option<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            policy: ReconstructionPolicy::default(),
            layer: None,
            selection_eps: 0.03,
            selection_samples: None,
            calibration_samples: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cap on test samples attacked per grid entry.
    pub test_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    /// Architecture of the transfer-attack surrogate; defaults to `model`.
    pub surrogate: Option<ModelConfig>,
    pub mae: MaeConfig,
    pub train_vit: TrainSpec,
    pub train_mae: TrainSpec,
    pub detector: DetectorSection,
    pub attacks: Vec<AttackConfig>,
    pub eval: EvalSection,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            surrogate: None,
            mae: MaeConfig::default(),
            train_vit: TrainSpec::default(),
            train_mae: TrainSpec::default(),
            detector: DetectorSection::default(),
            attacks: Vec::new(),
            eval: EvalSection::default(),
            seeds: Seeds::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// A parsed configuration and the text it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// Source text verbatim, followed by any applied overrides as comments.
    pub echo: String,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applying `overrides` as `(dotted.key, raw value)`.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<LoadedConfig> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut echo = text.to_string();
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
            if !echo.is_empty() && !echo.ends_with('\n') {
                echo.push('\n');
            }
            echo.push_str(&format!("# override: {key} = {raw}\n"));
        }
        let config: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig { config, echo })
    }

    /// Reads `path` (or the defaults when `None`) and applies the process
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<LoadedConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => {
                    Error::Config(format!("config file {} not found", p.display()))
                }
                _ => Error::io(p, e),
            })?,
            None => String::new(),
        };
        Self::from_toml_with(&text, &env_overrides(std::env::vars()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mae.validate()?;
        self.detector.policy.validate()?;
        let geometry = self.model.geometry();
        if self.mae.geometry() != geometry || self.mae.patch_size != self.model.patch_size {
            return config_err("model and mae disagree on image geometry or patch size");
        }
        if let Some(s) = &self.surrogate {
            s.validate()?;
            if s.geometry() != geometry || s.num_classes != self.model.num_classes {
                return config_err("surrogate must share the model's geometry and classes");
            }
        }
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
            if (s.height, s.width, s.channels) != geometry
                || s.num_classes != self.model.num_classes
            {
                return config_err(
                    "synthetic dataset geometry or class count disagrees with the model",
                );
            }
        }
        if let Some(l) = self.detector.layer {
            if l >= self.model.num_layers {
                return config_err(format!("detector.layer {l} outside the model"));
            }
        }
        for a in &self.attacks {
            a.validate(self.model.num_patches())?;
        }
        Ok(())
    }

    pub fn surrogate_config(&self) -> ModelConfig {
        self.surrogate.clone().unwrap_or_else(|| self.model.clone())
    }

    /// Loads or generates one split.
    pub fn dataset(&self, split: Split) -> Result<LabeledDataset> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => s.generate(split, self.seeds.data),
            DatasetSpec::Manifest { path } => {
                if !path.is_file() {
                    return config_err(format!("dataset manifest {} not found", path.display()));
                }
                let m = DatasetManifest::load(path)?;
                let (h, w, c) = self.model.geometry();
                let data = m.load_split(split, h, w, c)?;
                if data.num_classes() > self.model.num_classes {
                    return config_err(format!(
                        "manifest has {} classes, model {}",
                        data.num_classes(),
                        self.model.num_classes
                    ));
                }
                LabeledDataset::new(
                    data.images().to_vec(),
                    data.labels().to_vec(),
                    self.model.num_classes,
                )
            }
        }
    }
}

/// `VITGUARD_A__B=v` pairs from `vars`, as `("a.b", "v")`, sorted by key.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() {
                return None;
            }
            Some((rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
