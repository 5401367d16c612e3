//! Carlini–Wagner L2 attack in tanh space, optionally with the
//! detection-aware terms of the adaptive attack.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::image::{unpatchify_array, Image};
use crate::mae::{MaeModel, MaskSpec};
use crate::params::{AdamConfig, AdamState, ParamBinding};
use crate::tape::{Matrix, Tape, Var};
use crate::vit::{cw_hinge, ClassifierModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    /// Required logit margin κ.
    pub kappa: f64,
    pub steps: usize,
    pub lr: f64,
    /// Weight of the hinge term against `‖δ‖₂²`.
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_c() -> f64 {
    1.0
}

impl CwParams {
    /// κ = 50, 30 steps, learning rate 0.01, c = 1.
    pub fn reference() -> Self {
        Self {
            kappa: 50.0,
            steps: 30,
            lr: 0.01,
            c: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || self.steps == 0 || !(self.lr > 0.0) || !(self.c > 0.0) {
            return config_err("CW needs κ ≥ 0, lr > 0, c > 0 and at least one step");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwOutcome {
    pub x_adv: Image,
    /// `max_{j≠y} Z_j − Z_y ≥ κ` at the returned point.
    pub success: bool,
    pub margin: f64,
    pub l2: f64,
    /// Objective value at every evaluated iterate.
    pub losses: Vec<f64>,
}

/// Detection-aware terms added to the CW objective.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AdaptiveTerms<'a> {
    pub mae: &'a MaeModel,
    pub beta_attn: f64,
    pub beta_cls: f64,
}

/// `max_{j≠y} Z_j − Z_y`.
pub fn logit_margin(logits: &[f64], label: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    other - logits[label]
}

pub(crate) fn check_mae_geometry(model: &ClassifierModel, mae: &MaeModel) -> Result<()> {
    let (m, a) = (model.config(), mae.config());
    if m.geometry() != a.geometry() || m.patch_size != a.patch_size {
        return dim_err("MAE and classifier disagree on image geometry or patch size");
    }
    Ok(())
}

/// Records the objective on patch matrices: `‖xa − x0‖² + c·hinge`, plus
/// `β_attn·Σ_l ‖W_l(xa) − W_l(x′)‖ + β_cls·Σ_l ‖cls_l(xa) − cls_l(x′)‖`
/// with `x′` the differentiable reconstruction of `xa` under `mask`.
/// Returns the loss and the logits of `xa`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_objective(
    tape: &mut Tape,
    pm: &mut ParamBinding,
    pmae: Option<&mut ParamBinding>,
    model: &ClassifierModel,
    xa: Var,
    x0: Var,
    label: usize,
    params: &CwParams,
    adaptive: Option<(&AdaptiveTerms, &MaskSpec)>,
) -> (Var, Var) {
    let fwd = model.forward_tape(tape, pm, xa, 1, adaptive.is_some());
    let d = tape.sub(xa, x0);
    let dist = tape.sum_squares(d);
    let hinge = cw_hinge(tape, fwd.logits, label, params.kappa);
    let hinge = tape.scale(hinge, params.c);
    let mut loss = tape.add(dist, hinge);
    if let (Some((terms, mask)), Some(pmae)) = (adaptive, pmae) {
        let xp = terms.mae.reconstruct_tape(tape, pmae, xa, mask);
        let fwd_p = model.forward_tape(tape, pm, xp, 1, true);
        let mut attn = Vec::with_capacity(fwd.layers.len());
        let mut cls = Vec::with_capacity(fwd.layers.len());
        for (a, b) in fwd.layers.iter().zip(&fwd_p.layers) {
            let (ra, rb) = (a.attention.as_ref().unwrap(), b.attention.as_ref().unwrap());
            attn.push(tape.l2_distance(ra.probs[0], rb.probs[0]));
            cls.push(tape.l2_distance(a.cls, b.cls));
        }
        let attn = tape.concat_rows(&attn);
        let attn = tape.sum(attn);
        let attn = tape.scale(attn, terms.beta_attn);
        let cls = tape.concat_rows(&cls);
        let cls = tape.sum(cls);
        let cls = tape.scale(cls, terms.beta_cls);
        let extra = tape.add(attn, cls);
        loss = tape.add(loss, extra);
    }
    (loss, fwd.logits)
}

const TANH_BOUND: f64 = 1.0 - 1e-9;

/// Shared CW loop. `next_mask` supplies the reconstruction mask of each
/// iteration when adaptive terms are present.
pub(crate) fn cw_core(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    params: &CwParams,
    adaptive: Option<(AdaptiveTerms, &mut dyn FnMut() -> Result<MaskSpec>)>,
) -> Result<CwOutcome> {
    params.validate()?;
    if model.config().num_classes < 2 {
        return config_err("CW needs at least two classes");
    }
    let x_p = model.patches(x)?;
    let mut w = x_p.mapv(|v| (2.0 * v - 1.0).clamp(-TANH_BOUND, TANH_BOUND).atanh());
    let mut adam = AdamState::new(w.dim());
    let adam_cfg = AdamConfig::default();
    let half = Array2::from_elem(w.dim(), 0.5);
    let (terms, mut next_mask) = match adaptive {
        Some((t, f)) => {
            check_mae_geometry(model, t.mae)?;
            (Some(t), Some(f))
        }
        None => (None, None),
    };

    let mut losses = Vec::with_capacity(params.steps + 1);
    let mut best: Option<(f64, Matrix, f64)> = None;
    let mut last: Option<(f64, Matrix, f64)> = None;
    for it in 0..=params.steps {
        let mask = match next_mask.as_mut() {
            Some(f) => Some(f()?),
            None => None,
        };
        let mut tape = Tape::new();
        let mut pm = model.params().bind(false);
        let mut pmae = terms.map(|t| t.mae.params().bind(false));
        let wv = tape.leaf(w.clone());
        let t = tape.tanh(wv);
        let t = tape.scale(t, 0.5);
        let h = tape.constant(half.clone());
        let xa = tape.add(t, h);
        let x0 = tape.constant(x_p.clone());
        let adaptive = terms.as_ref().zip(mask.as_ref());
        let (loss, logits) = record_objective(
            &mut tape,
            &mut pm,
            pmae.as_mut(),
            model,
            xa,
            x0,
            y,
            params,
            adaptive,
        );
        losses.push(tape.scalar(loss));

        let xa_val = tape.value(xa).clone();
        let dist = (&xa_val - &x_p).mapv(|v| v * v).sum();
        let margin = logit_margin(tape.value(logits).row(0).as_slice().unwrap(), y);
        if margin >= params.kappa && best.as_ref().is_none_or(|b| dist < b.0) {
            best = Some((dist, xa_val.clone(), margin));
        }
        if it == params.steps {
            last = Some((dist, xa_val, margin));
            break;
        }
        let mut grads = tape.backward(loss);
        let gw = grads.take(wv).expect("w is tracked");
        adam.step(&adam_cfg, &mut w, &gw, params.lr);
    }
    let success = best.is_some();
    let (dist, patches, margin) = best.or(last).expect("at least one iterate");
    let (h, wd, c) = model.config().geometry();
    let pixels = unpatchify_array(&patches, h, wd, c, model.config().patch_size)?;
    Ok(CwOutcome {
        x_adv: Image::clamped(pixels),
        success,
        margin,
        l2: dist.sqrt(),
        losses,
    })
}

/// Minimizes `‖δ‖₂² + c·max(Z_y − max_{j≠y} Z_j + κ, 0)` with Adam over
/// `w`, `x + δ = (tanh w + 1)/2`. Returns the smallest-distortion iterate
/// reaching margin κ, else the final one.
pub fn cw(model: &ClassifierModel, x: &Image, y: usize, params: &CwParams) -> Result<CwOutcome> {
    cw_core(model, x, y, params, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_definition() {
        assert_eq!(logit_margin(&[1.0, 3.0, 2.0], 0), 2.0);
        assert_eq!(logit_margin(&[5.0, 3.0, 2.0], 0), -2.0);
        assert_eq!(logit_margin(&[5.0, 3.0, 2.0], 1), 2.0);
    }
}
