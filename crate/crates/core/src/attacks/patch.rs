//! Attention-aware patch attack.
//!
//! The patches receiving the most attention (summed over layers, heads and
//! queries) are chosen, and only their pixels are optimized, without a norm
//! bound, to raise the cross-entropy plus `α` times the attention flowing
//! into them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::image::{unpatchify_array, Image};
use crate::params::{AdamConfig, AdamState};
use crate::tape::Tape;
use crate::vit::{ClassifierModel, TransformerTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLossVariant {
    /// Attention probabilities (Patch-Fool style).
    PostSoftmax,
    /// Scaled attention logits (Attention-Fool style).
    PreSoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub num_patches: usize,
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    pub variant: PatchLossVariant,
}

impl PatchParams {
    /// One patch, α = 0.002, 250 steps, learning rate 0.05.
    pub fn reference(variant: PatchLossVariant) -> Self {
        Self {
            num_patches: 1,
            alpha: 0.002,
            steps: 250,
            lr: 0.05,
            variant,
        }
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if self.num_patches == 0 || self.num_patches > num_patches {
            return config_err(format!(
                "num_patches {} outside [1, {num_patches}]",
                self.num_patches
            ));
        }
        if self.steps == 0 || !(self.lr > 0.0) || !(self.alpha >= 0.0) {
            return config_err("patch attack needs steps ≥ 1, lr > 0 and α ≥ 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchOutcome {
    pub x_adv: Image,
    /// Selected patch indices in descending attention order.
    pub patches: Vec<usize>,
    /// Objective (to be maximized) at every iterate before its update.
    pub objectives: Vec<f64>,
}

/// Total attention received by each patch token, summed over layers and
/// query tokens.
pub fn incoming_attention(trace: &TransformerTrace) -> Vec<f64> {
    let t = trace.raw_attention[0].ncols();
    let mut acc = vec![0.0; t - 1];
    for a in &trace.raw_attention {
        for (j, slot) in acc.iter_mut().enumerate() {
            *slot += a.column(j + 1).sum();
        }
    }
    acc
}

/// The `k` patches with the highest incoming attention; ties favour the
/// lower index.
pub fn select_patches(trace: &TransformerTrace, k: usize) -> Vec<usize> {
    let scores = incoming_attention(trace);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

pub fn patch_attack(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    params: &PatchParams,
) -> Result<PatchOutcome> {
    params.validate(model.num_patches())?;
    let trace = model.forward(x)?;
    let selected = select_patches(&trace, params.num_patches);
    let base = model.patches(x)?;
    let n = base.nrows();
    let k = selected.len();

    let mut pos = vec![None; n];
    for (s, &i) in selected.iter().enumerate() {
        pos[i] = Some(s);
    }
    let order: Vec<usize> = (0..n).map(|i| pos[i].unwrap_or(k + i)).collect();
    // Column indicator of the selected patch tokens (CLS is token 0).
    let mut indicator = Array2::zeros((n + 1, 1));
    for &i in &selected {
        indicator[[i + 1, 0]] = 1.0;
    }

    let mut sel = base.select(ndarray::Axis(0), &selected);
    let mut adam = AdamState::new(sel.dim());
    let cfg = AdamConfig::default();
    let mut objectives = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let mut tape = Tape::new();
        let mut p = model.params().bind(false);
        let sv = tape.leaf(sel.clone());
        let rest = tape.constant(base.clone());
        let all = tape.concat_rows(&[sv, rest]);
        let xa = tape.gather_rows(all, &order);
        let record = params.alpha != 0.0;
        let fwd = model.forward_tape(&mut tape, &mut p, xa, 1, record);
        let mut obj = tape.cross_entropy(fwd.logits, &[y]);
        if record {
            let ind = tape.constant(indicator.clone());
            let mut terms = Vec::with_capacity(fwd.layers.len());
            for layer in &fwd.layers {
                let rec = layer.attention.as_ref().unwrap();
                let map = match params.variant {
                    PatchLossVariant::PostSoftmax => rec.probs[0],
                    PatchLossVariant::PreSoftmax => rec.scores[0],
                };
                let into = tape.matmul(map, ind);
                terms.push(tape.sum(into));
            }
            let stacked = tape.concat_rows(&terms);
            let attn = tape.sum(stacked);
            let attn = tape.scale(attn, params.alpha);
            obj = tape.add(obj, attn);
        }
        objectives.push(tape.scalar(obj));
        let neg = tape.scale(obj, -1.0);
        let g = tape.backward(neg).take(sv).expect("selection is tracked");
        adam.step(&cfg, &mut sel, &g, params.lr);
        sel.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    let mut out = base;
    for (s, &i) in selected.iter().enumerate() {
        out.row_mut(i).assign(&sel.row(s));
    }
    let (h, w, c) = model.config().geometry();
    let pixels = unpatchify_array(&out, h, w, c, model.config().patch_size)?;
    Ok(PatchOutcome {
        x_adv: Image::from_trusted(pixels),
        patches: selected,
        objectives,
    })
}
