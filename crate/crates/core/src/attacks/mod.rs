//! Adversarial example generation.

pub mod adaptive;
pub mod cw;
pub mod linf;
pub mod patch;

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adaptive::{adaptive_cw, adaptive_cw_frozen, AdaptiveParams, CompositeLoss};
pub use cw::{cw, logit_margin, CwOutcome, CwParams};
pub use linf::{
    apgd, fgsm, pgd, project_linf, transfer_attack, ApgdOutcome, ApgdParams, PgdParams,
};
pub use patch::{patch_attack, select_patches, PatchLossVariant, PatchOutcome, PatchParams};

use crate::container::{Container, Tensor};
use crate::error::{config_err, input_err, Error, Result};
use crate::image::Image;
use crate::mae::MaeModel;
use crate::rng::{stream, StageRng};
use crate::vit::{predict_one, ClassifierModel};

/// Per-attack hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    Fgsm {
        eps: f64,
    },
    Pgd(PgdParams),
    Apgd(ApgdParams),
    Cw(CwParams),
    Patch(PatchParams),
    /// PGD run against the surrogate model.
    Transfer(PgdParams),
    AdaptiveCw(AdaptiveParams),
}

impl AttackConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AttackConfig::Fgsm { .. } => "fgsm",
            AttackConfig::Pgd(_) => "pgd",
            AttackConfig::Apgd(_) => "apgd",
            AttackConfig::Cw(_) => "cw",
            AttackConfig::Patch(p) => match p.variant {
                PatchLossVariant::PostSoftmax => "patch_fool",
                PatchLossVariant::PreSoftmax => "attention_fool",
            },
            AttackConfig::Transfer(_) => "transfer",
            AttackConfig::AdaptiveCw(_) => "adaptive_cw",
        }
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, AttackConfig::Patch(_))
    }

    /// L∞ radius for bounded attacks.
    pub fn linf_bound(&self) -> Option<f64> {
        match self {
            AttackConfig::Fgsm { eps } => Some(*eps),
            AttackConfig::Pgd(p) | AttackConfig::Transfer(p) => Some(p.eps),
            AttackConfig::Apgd(p) => Some(p.eps),
            _ => None,
        }
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        match self {
            AttackConfig::Fgsm { eps } => {
                if !(*eps >= 0.0 && eps.is_finite()) {
                    return config_err(format!("FGSM ε = {eps} invalid"));
                }
                Ok(())
            }
            AttackConfig::Pgd(p) | AttackConfig::Transfer(p) => p.validate(),
            AttackConfig::Apgd(p) => p.validate(),
            AttackConfig::Cw(p) => p.validate(),
            AttackConfig::Patch(p) => p.validate(num_patches),
            AttackConfig::AdaptiveCw(p) => p.validate(),
        }
    }
}

/// Models an attack may need.
#[derive(Clone, Copy, Debug)]
pub struct AttackContext<'a> {
    pub model: &'a ClassifierModel,
    pub surrogate: Option<&'a ClassifierModel>,
    pub mae: Option<&'a MaeModel>,
}

impl<'a> AttackContext<'a> {
    pub fn new(model: &'a ClassifierModel) -> Self {
        Self {
            model,
            surrogate: None,
            mae: None,
        }
    }
}

/// Runs one attack on one sample.
pub fn run_attack(
    config: &AttackConfig,
    ctx: &AttackContext,
    x: &Image,
    y: usize,
    rng: &mut StageRng,
) -> Result<Image> {
    let model = ctx.model;
    config.validate(model.num_patches())?;
    match config {
        AttackConfig::Fgsm { eps } => fgsm(model, x, y, *eps),
        AttackConfig::Pgd(p) => pgd(model, x, y, p),
        AttackConfig::Apgd(p) => Ok(apgd(model, x, y, p)?.x_adv),
        AttackConfig::Cw(p) => Ok(cw(model, x, y, p)?.x_adv),
        AttackConfig::Patch(p) => Ok(patch_attack(model, x, y, p)?.x_adv),
        AttackConfig::Transfer(p) => {
            let s = ctx
                .surrogate
                .ok_or_else(|| Error::Config("transfer attack needs a surrogate model".into()))?;
            transfer_attack(s, x, y, p)
        }
        AttackConfig::AdaptiveCw(p) => {
            let mae = ctx
                .mae
                .ok_or_else(|| Error::Config("adaptive attack needs an MAE".into()))?;
            Ok(adaptive_cw(model, mae, x, y, p, rng)?.x_adv)
        }
    }
}

/// Originals, adversarials and outcomes of one attack run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub attack: String,
    pub originals: Vec<Image>,
    pub adversarials: Vec<Image>,
    pub labels: Vec<usize>,
    /// Clean input classified correctly and adversarial misclassified.
    pub success: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.len() as f64
    }

    /// The successful samples only.
    pub fn successful(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.success[i]).collect();
        self.subset(&keep)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            attack: self.attack.clone(),
            originals: idx.iter().map(|&i| self.originals[i].clone()).collect(),
            adversarials: idx.iter().map(|&i| self.adversarials[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            success: idx.iter().map(|&i| self.success[i]).collect(),
            linf: idx.iter().map(|&i| self.linf[i]).collect(),
            l2: idx.iter().map(|&i| self.l2[i]).collect(),
        }
    }

    fn build(
        model: &ClassifierModel,
        attack: &str,
        originals: Vec<Image>,
        adversarials: Vec<Image>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if originals.len() != adversarials.len() || originals.len() != labels.len() {
            return input_err(format!(
                "{} originals, {} adversarials and {} labels",
                originals.len(),
                adversarials.len(),
                labels.len()
            ));
        }
        let success = originals
            .par_iter()
            .zip(adversarials.par_iter())
            .zip(labels.par_iter())
            .map(|((x, a), &y)| Ok(predict_one(model, x)? == y && predict_one(model, a)? != y))
            .collect::<Result<Vec<bool>>>()?;
        let linf = originals
            .iter()
            .zip(&adversarials)
            .map(|(x, a)| x.linf_distance(a))
            .collect();
        let l2 = originals
            .iter()
            .zip(&adversarials)
            .map(|(x, a)| x.l2_distance(a))
            .collect();
        Ok(Self {
            attack: attack.to_string(),
            originals,
            adversarials,
            labels,
            success,
            linf,
            l2,
        })
    }

    pub fn save(&self, path: &Path, config_echo: &str) -> Result<()> {
        let meta = serde_json::json!({ "attack": self.attack, "config": config_echo }).to_string();
        let mut c = Container::new(ARCHIVE_KIND, meta);
        let dims = self.originals.first().map_or((0, 0, 0), Image::dims);
        let shape = vec![self.len(), dims.0, dims.1, dims.2];
        let flat = |imgs: &[Image]| imgs.iter().flat_map(|i| i.as_slice().to_vec()).collect();
        c.push(Tensor::new(
            "originals",
            shape.clone(),
            flat(&self.originals),
        )?);
        c.push(Tensor::new(
            "adversarials",
            shape,
            flat(&self.adversarials),
        )?);
        let labels = self.labels.iter().map(|&l| l as f64).collect();
        c.push(Tensor::new("labels", vec![self.len()], labels)?);
        let success = self
            .success
            .iter()
            .map(|&s| f64::from(u8::from(s)))
            .collect();
        c.push(Tensor::new("success", vec![self.len()], success)?);
        c.push(Tensor::new("linf", vec![self.len()], self.linf.clone())?);
        c.push(Tensor::new("l2", vec![self.len()], self.l2.clone())?);
        c.save(path)
    }

    /// Loads an archive, returning the batch and the echoed configuration.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let c = Container::load(path)?;
        c.expect_kind(ARCHIVE_KIND)?;
        let meta: serde_json::Value =
            serde_json::from_str(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
        let images = |name: &str| -> Result<Vec<Image>> {
            let t = c.tensor(name)?;
            let [n, h, w, ch] = t.shape[..] else {
                return Err(Error::Format(format!("`{name}` is not 4-D")));
            };
            let per = h * w * ch;
            (0..n)
                .map(|i| {
                    let px =
                        Array3::from_shape_vec((h, w, ch), t.data[i * per..(i + 1) * per].to_vec())
                            .map_err(|e| Error::Format(e.to_string()))?;
                    Image::new(px).map_err(|e| Error::Format(e.to_string()))
                })
                .collect()
        };
        let batch = Self {
            attack: meta["attack"].as_str().unwrap_or_default().to_string(),
            originals: images("originals")?,
            adversarials: images("adversarials")?,
            labels: c
                .tensor("labels")?
                .data
                .iter()
                .map(|&v| v as usize)
                .collect(),
            success: c
                .tensor("success")?
                .data
                .iter()
                .map(|&v| v != 0.0)
                .collect(),
            linf: c.tensor("linf")?.data.clone(),
            l2: c.tensor("l2")?.data.clone(),
        };
        let n = batch.originals.len();
        if [
            batch.adversarials.len(),
            batch.labels.len(),
            batch.success.len(),
        ] != [n; 3]
        {
            return Err(Error::Format(
                "archive tensors disagree on sample count".into(),
            ));
        }
        Ok((
            batch,
            meta["config"].as_str().unwrap_or_default().to_string(),
        ))
    }
}

const ARCHIVE_KIND: &str = "vitguard.adversarial_batch";

/// Keeps index `i` iff the model classifies `originals[i]` correctly and
/// `adversarials[i]` incorrectly.
pub fn filter_successful(
    model: &ClassifierModel,
    originals: &[Image],
    adversarials: &[Image],
    labels: &[usize],
) -> Result<AdversarialBatch> {
    let batch = AdversarialBatch::build(
        model,
        "unnamed",
        originals.to_vec(),
        adversarials.to_vec(),
        labels.to_vec(),
    )?;
    Ok(batch.successful())
}

/// Attacks every sample in parallel; sample `i` draws from stream `i` of
/// `seed`. Success flags are judged against `ctx.model`.
pub fn generate_batch(
    config: &AttackConfig,
    ctx: &AttackContext,
    images: &[Image],
    labels: &[usize],
    seed: u64,
) -> Result<AdversarialBatch> {
    if images.len() != labels.len() {
        return input_err("images and labels differ in length");
    }
    config.validate(ctx.model.num_patches())?;
    let adversarials = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| run_attack(config, ctx, x, y, &mut stream(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    AdversarialBatch::build(
        ctx.model,
        config.name(),
        images.to_vec(),
        adversarials,
        labels.to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_names_and_serde() {
        let cfgs = [
            AttackConfig::Fgsm { eps: 0.03 },
            AttackConfig::Pgd(PgdParams::reference()),
            AttackConfig::Apgd(ApgdParams::reference()),
            AttackConfig::Cw(CwParams::reference()),
            AttackConfig::Patch(PatchParams::reference(PatchLossVariant::PreSoftmax)),
            AttackConfig::Transfer(PgdParams::reference()),
            AttackConfig::AdaptiveCw(AdaptiveParams::reference()),
        ];
        for c in cfgs {
            let text = serde_json::to_string(&c).unwrap();
            let back: AttackConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, c);
            assert!(c.validate(64).is_ok());
        }
        assert_eq!(cfgs[4].name(), "attention_fool");
        assert!(AttackConfig::Patch(PatchParams {
            num_patches: 65,
            ..PatchParams::reference(PatchLossVariant::PostSoftmax)
        })
        .validate(64)
        .is_err());
    }
}
