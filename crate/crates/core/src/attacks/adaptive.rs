//! Detection-aware CW attack.
//!
//! The objective adds, for every block, the distance between the raw
//! head-averaged attention maps of `x_adv` and of its MAE reconstruction
//! `x′`, and the distance between their CLS representations. Gradients flow
//! through the classifier on both paths and through the MAE.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::cw::{
    check_mae_geometry, cw_core, record_objective, AdaptiveTerms, CwOutcome, CwParams,
};
use crate::error::{config_err, Result};
use crate::image::{unpatchify_array, Image};
use crate::mae::{sample_mask, MaeModel, MaskSpec, MaskStrategy};
use crate::rng::StageRng;
use crate::tape::Tape;
use crate::vit::ClassifierModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub beta_attn: f64,
    pub beta_cls: f64,
    #[serde(default = "default_ratio")]
    pub mask_ratio: f64,
    pub inner: CwParams,
}

fn default_ratio() -> f64 {
    0.5
}

impl AdaptiveParams {
    /// `(β_attn, β_cls) = (1e-2, 1e-3)` around the reference CW settings.
    pub fn reference() -> Self {
        Self {
            beta_attn: 1e-2,
            beta_cls: 1e-3,
            mask_ratio: default_ratio(),
            inner: CwParams::reference(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_attn >= 0.0 && self.beta_cls >= 0.0) {
            return config_err("β coefficients must be non-negative");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return config_err("adaptive mask ratio outside (0, 1)");
        }
        self.inner.validate()
    }
}

/// The composite objective at a fixed mask, as a differentiable function of
/// the adversarial pixels.
#[derive(Clone, Copy, Debug)]
pub struct CompositeLoss<'a> {
    pub mae: &'a MaeModel,
    pub mask: &'a MaskSpec,
    pub original: &'a Image,
    pub beta_attn: f64,
    pub beta_cls: f64,
    pub kappa: f64,
    pub c: f64,
}

impl CompositeLoss<'_> {
    /// Value and pixel gradient at `x_adv`.
    pub fn value_and_gradient(
        &self,
        model: &ClassifierModel,
        x_adv: &Image,
        label: usize,
    ) -> Result<(f64, Array3<f64>)> {
        check_mae_geometry(model, self.mae)?;
        let xa_p = model.patches(x_adv)?;
        let x0_p = model.patches(self.original)?;
        let params = CwParams {
            kappa: self.kappa,
            steps: 1,
            lr: 1.0,
            c: self.c,
        };
        let terms = AdaptiveTerms {
            mae: self.mae,
            beta_attn: self.beta_attn,
            beta_cls: self.beta_cls,
        };
        let mut tape = Tape::new();
        let mut pm = model.params().bind(false);
        let mut pmae = self.mae.params().bind(false);
        let xa = tape.leaf(xa_p);
        let x0 = tape.constant(x0_p);
        let (loss, _) = record_objective(
            &mut tape,
            &mut pm,
            Some(&mut pmae),
            model,
            xa,
            x0,
            label,
            &params,
            Some((&terms, self.mask)),
        );
        let value = tape.scalar(loss);
        let g = tape.backward(loss).take(xa).expect("input is tracked");
        let (h, w, c) = model.config().geometry();
        Ok((
            value,
            unpatchify_array(&g, h, w, c, model.config().patch_size)?,
        ))
    }
}

/// Adaptive CW with a fresh random mask per iteration drawn from `rng`.
pub fn adaptive_cw(
    model: &ClassifierModel,
    mae: &MaeModel,
    x: &Image,
    y: usize,
    params: &AdaptiveParams,
    rng: &mut StageRng,
) -> Result<CwOutcome> {
    params.validate()?;
    let n = mae.num_patches();
    let ratio = params.mask_ratio;
    let mut next = || sample_mask(n, ratio, MaskStrategy::Random, rng, None);
    run(model, mae, x, y, params, &mut next)
}

/// Adaptive CW with one mask reused at every iteration.
pub fn adaptive_cw_frozen(
    model: &ClassifierModel,
    mae: &MaeModel,
    x: &Image,
    y: usize,
    params: &AdaptiveParams,
    mask: &MaskSpec,
) -> Result<CwOutcome> {
    params.validate()?;
    let mut next = || Ok(mask.clone());
    run(model, mae, x, y, params, &mut next)
}

fn run(
    model: &ClassifierModel,
    mae: &MaeModel,
    x: &Image,
    y: usize,
    params: &AdaptiveParams,
    next: &mut dyn FnMut() -> Result<MaskSpec>,
) -> Result<CwOutcome> {
    let terms = AdaptiveTerms {
        mae,
        beta_attn: params.beta_attn,
        beta_cls: params.beta_cls,
    };
    cw_core(model, x, y, &params.inner, Some((terms, next)))
}
