//! Transformer building blocks recorded on a [`Tape`].
//!
//! Blocks are pre-norm: `x + MSA(LN(x))` followed by `x + MLP(LN(x))`.
//! Token sequences of several samples are stacked row-wise, so a batch of
//! `B` sequences of length `T` is a `(B·T)×D` matrix; attention is computed
//! per sample.

use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::params::{xavier_uniform, ParamBinding, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.require(&format!("{name}.weight"))?,
            bias: store.require(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinding, x: Var) -> Var {
        let w = p.var(tape, self.weight);
        let b = p.var(tape, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.require(&format!("{name}.gamma"))?,
            beta: store.require(&format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinding, x: Var) -> Var {
        let g = p.var(tape, self.gamma);
        let b = p.var(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Per-sample attention statistics of one block, averaged over heads.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// Post-softmax maps, one `T×T` var per sample.
    pub probs: Vec<Var>,
    /// Scaled pre-softmax scores, one `T×T` var per sample.
    pub scores: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        mlp_hidden: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), dim),
            qkv: Linear::init(store, rng, &format!("{name}.attn.qkv"), dim, 3 * dim),
            proj: Linear::init(store, rng, &format!("{name}.attn.proj"), dim, dim),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), dim),
            fc1: Linear::init(store, rng, &format!("{name}.mlp.fc1"), dim, mlp_hidden),
            fc2: Linear::init(store, rng, &format!("{name}.mlp.fc2"), mlp_hidden, dim),
        }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::lookup(store, &format!("{name}.norm1"))?,
            qkv: Linear::lookup(store, &format!("{name}.attn.qkv"))?,
            proj: Linear::lookup(store, &format!("{name}.attn.proj"))?,
            norm2: LayerNorm::lookup(store, &format!("{name}.norm2"))?,
            fc1: Linear::lookup(store, &format!("{name}.mlp.fc1"))?,
            fc2: Linear::lookup(store, &format!("{name}.mlp.fc2"))?,
        })
    }

    /// Runs the block over `x` holding `x.rows / seq_len` stacked sequences.
    /// Head-averaged attention is recorded when `record` is set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinding,
        x: Var,
        seq_len: usize,
        heads: usize,
        record: bool,
    ) -> (Var, Option<AttentionRecord>) {
        let (rows, dim) = tape.value(x).dim();
        debug_assert_eq!(rows % seq_len, 0);
        let batch = rows / seq_len;
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let h = self.norm1.forward(tape, p, x);
        let qkv = self.qkv.forward(tape, p, h);

        let mut record_out = record.then(|| AttentionRecord {
            probs: Vec::with_capacity(batch),
            scores: Vec::with_capacity(batch),
        });
        let mut contexts = Vec::with_capacity(batch);
        for b in 0..batch {
            let seq = if batch == 1 {
                qkv
            } else {
                tape.slice_rows(qkv, b * seq_len, seq_len)
            };
            let mut head_out = Vec::with_capacity(heads);
            let mut prob_sum: Option<Var> = None;
            let mut score_sum: Option<Var> = None;
            for hd in 0..heads {
                let q = tape.slice_cols(seq, hd * head_dim, head_dim);
                let k = tape.slice_cols(seq, dim + hd * head_dim, head_dim);
                let v = tape.slice_cols(seq, 2 * dim + hd * head_dim, head_dim);
                let raw = tape.matmul_t(q, k);
                let scores = tape.scale(raw, scale);
                let probs = tape.softmax(scores);
                head_out.push(tape.matmul(probs, v));
                if record {
                    prob_sum = Some(match prob_sum {
                        Some(acc) => tape.add(acc, probs),
                        None => probs,
                    });
                    score_sum = Some(match score_sum {
                        Some(acc) => tape.add(acc, scores),
                        None => scores,
                    });
                }
            }
            if let Some(rec) = record_out.as_mut() {
                let inv = 1.0 / heads as f64;
                let pm = tape.scale(prob_sum.unwrap(), inv);
                let sm = tape.scale(score_sum.unwrap(), inv);
                rec.probs.push(pm);
                rec.scores.push(sm);
            }
            contexts.push(if heads == 1 {
                head_out[0]
            } else {
                tape.concat_cols(&head_out)
            });
        }
        let ctx = if batch == 1 {
            contexts[0]
        } else {
            tape.concat_rows(&contexts)
        };
        let attn_out = self.proj.forward(tape, p, ctx);
        let x = tape.add(x, attn_out);

        let h = self.norm2.forward(tape, p, x);
        let h = self.fc1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h);
        (tape.add(x, h), record_out)
    }
}
