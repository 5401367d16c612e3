//! Masked autoencoder used to reconstruct inputs before detection.
//!
//! The encoder sees only the unmasked patches; the decoder receives the
//! encoded tokens plus a learned mask token at every hidden position and
//! predicts raw pixels for all patches. A reconstruction keeps every
//! unmasked patch of the input verbatim and fills the masked ones with the
//! decoder prediction clamped to `[0, 1]`.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{config_err, dim_err, input_err, Error, Result};
use crate::image::{num_patches, patchify, unpatchify_array, Image};
use crate::layers::{Block, LayerNorm, Linear};
use crate::params::{cosine_lr, normal, Adam, AdamConfig, ParamBinding, ParamId, ParamStore};
use crate::rollout::cls_attention_all_layers;
use crate::tape::{Matrix, Tape, Var};
use crate::vit::{conform_store, stack_patches, store_from_container, store_to_container};
use crate::vit::{EpochLog, TrainSpec, TransformerTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    /// Hide the most salient patches.
    Salient,
    /// Hide the least salient patches.
    NonSalient,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "salient" => Ok(Self::Salient),
            "non_salient" | "non-salient" => Ok(Self::NonSalient),
            other => config_err(format!("unknown masking strategy `{other}`")),
        }
    }
}

/// Binary patch mask; `keep[i]` is `m_i = 1` (patch visible to the encoder).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    keep: Vec<bool>,
    strategy: MaskStrategy,
}

impl MaskSpec {
    pub fn new(keep: Vec<bool>, strategy: MaskStrategy) -> Self {
        Self { keep, strategy }
    }

    pub fn all_visible(n: usize) -> Self {
        Self::new(vec![true; n], MaskStrategy::Random)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// `p = 1 − Σm_i / N`.
    pub fn ratio(&self) -> f64 {
        let kept = self.keep.iter().filter(|&&k| k).count();
        1.0 - kept as f64 / self.keep.len() as f64
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn complement(&self) -> Self {
        Self::new(self.keep.iter().map(|k| !k).collect(), self.strategy)
    }
}

/// `round(N·ratio)`, the number of hidden patches.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).round() as usize
}

pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    ratio: f64,
    strategy: MaskStrategy,
    rng: &mut R,
    saliency: Option<&[f64]>,
) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return config_err(format!("masking ratio {ratio} outside (0, 1)"));
    }
    let k = masked_count(n, ratio);
    if k >= n {
        return config_err(format!("ratio {ratio} would hide all {n} patches"));
    }
    let mut keep = vec![true; n];
    match strategy {
        MaskStrategy::Random => {
            for i in rand::seq::index::sample(rng, n, k) {
                keep[i] = false;
            }
        }
        MaskStrategy::Salient | MaskStrategy::NonSalient => {
            let Some(scores) = saliency else {
                return config_err(format!("{strategy:?} masking needs saliency scores"));
            };
            if scores.len() != n {
                return dim_err(format!("{} saliency scores for {n} patches", scores.len()));
            }
            let mut order: Vec<usize> = (0..n).collect();
            // Stable sort: equal scores keep the lower index first.
            if strategy == MaskStrategy::Salient {
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            } else {
                order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
            }
            for &i in &order[..k] {
                keep[i] = false;
            }
        }
    }
    Ok(MaskSpec::new(keep, strategy))
}

/// Per-patch saliency: patch entries of the final-layer CLS rollout vector.
pub fn saliency_from_trace(trace: &TransformerTrace) -> Result<Vec<f64>> {
    let all = cls_attention_all_layers(trace)?;
    let last = all
        .last()
        .ok_or_else(|| Error::Input("trace has no layers".into()))?;
    Ok(last.patch_scores())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_dim: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Masking ratio used during training.
    pub mask_ratio: f64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            encoder_dim: 32,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_mlp_dim: 64,
            decoder_dim: 32,
            decoder_layers: 1,
            decoder_heads: 4,
            decoder_mlp_dim: 64,
            mask_ratio: 0.5,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        num_patches(self.image_height, self.image_width, self.patch_size)?;
        for (dim, heads, what) in [
            (self.encoder_dim, self.encoder_heads, "encoder"),
            (self.decoder_dim, self.decoder_heads, "decoder"),
        ] {
            if heads == 0 || dim % heads != 0 {
                return config_err(format!("{what} dim {dim} not divisible by {heads} heads"));
            }
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return config_err("encoder and decoder need at least one block");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return config_err(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.image_height, self.image_width, self.channels)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    enc_pos: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    pred: Linear,
}

impl Layout {
    fn lookup(store: &ParamStore, cfg: &MaeConfig) -> Result<Self> {
        Ok(Self {
            patch_embed: Linear::lookup(store, "encoder.patch_embed")?,
            enc_pos: store.require("encoder.pos_embed")?,
            enc_blocks: (0..cfg.encoder_layers)
                .map(|l| Block::lookup(store, &format!("encoder.blocks.{l}")))
                .collect::<Result<_>>()?,
            enc_norm: LayerNorm::lookup(store, "encoder.norm")?,
            dec_embed: Linear::lookup(store, "decoder.embed")?,
            mask_token: store.require("decoder.mask_token")?,
            dec_pos: store.require("decoder.pos_embed")?,
            dec_blocks: (0..cfg.decoder_layers)
                .map(|l| Block::lookup(store, &format!("decoder.blocks.{l}")))
                .collect::<Result<_>>()?,
            dec_norm: LayerNorm::lookup(store, "decoder.norm")?,
            pred: Linear::lookup(store, "decoder.pred")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MaeModel {
    config: MaeConfig,
    store: ParamStore,
    layout: Layout,
}

/// Output of one reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    pub x_prime: Image,
    pub mask_used: MaskSpec,
    /// Mean squared error of each masked patch against the input, in
    /// masked-index order.
    pub masked_patch_loss: Vec<f64>,
}

const CHECKPOINT_KIND: &str = "vitguard.mae";

impl MaeModel {
    pub fn init(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.num_patches();
        let (de, dd) = (config.encoder_dim, config.decoder_dim);
        let mut store = ParamStore::new();
        Linear::init(
            &mut store,
            &mut rng,
            "encoder.patch_embed",
            config.patch_dim(),
            de,
        );
        store.add("encoder.pos_embed", normal(&mut rng, (n, de), 0.02));
        for l in 0..config.encoder_layers {
            let name = format!("encoder.blocks.{l}");
            Block::init(&mut store, &mut rng, &name, de, config.encoder_mlp_dim);
        }
        LayerNorm::init(&mut store, "encoder.norm", de);
        Linear::init(&mut store, &mut rng, "decoder.embed", de, dd);
        store.add("decoder.mask_token", normal(&mut rng, (1, dd), 0.02));
        store.add("decoder.pos_embed", normal(&mut rng, (n, dd), 0.02));
        for l in 0..config.decoder_layers {
            let name = format!("decoder.blocks.{l}");
            Block::init(&mut store, &mut rng, &name, dd, config.decoder_mlp_dim);
        }
        LayerNorm::init(&mut store, "decoder.norm", dd);
        Linear::init(&mut store, &mut rng, "decoder.pred", dd, config.patch_dim());
        let layout = Layout::lookup(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn from_parts(config: MaeConfig, store: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        let store = conform_store(&template.store, &store)?;
        let layout = Layout::lookup(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_patches(&self) -> usize {
        self.config.num_patches()
    }

    pub fn check_geometry(&self, image: &Image) -> Result<()> {
        if image.dims() != self.config.geometry() {
            return dim_err(format!(
                "image {:?} does not match MAE geometry {:?}",
                image.dims(),
                self.config.geometry()
            ));
        }
        Ok(())
    }

    fn check_masks(&self, masks: &[MaskSpec]) -> Result<usize> {
        let n = self.num_patches();
        let visible = masks.first().map_or(0, |m| m.len() - m.num_masked());
        for m in masks {
            if m.len() != n {
                return dim_err(format!("mask covers {} patches, MAE expects {n}", m.len()));
            }
            if m.len() - m.num_masked() != visible {
                return input_err("masks in one batch must keep the same number of patches");
            }
        }
        if visible == 0 {
            return input_err("mask hides every patch; the encoder needs at least one");
        }
        Ok(visible)
    }

    /// Decoder pixel predictions for all patches of `masks.len()` stacked
    /// patch matrices (`(B·N)×patch_dim`).
    pub(crate) fn predict_tape(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinding,
        patches: Var,
        masks: &[MaskSpec],
    ) -> Var {
        let n = self.num_patches();
        let batch = masks.len();
        let visible: Vec<Vec<usize>> = masks.iter().map(MaskSpec::visible_indices).collect();
        let v = visible[0].len();
        let m = n - v;

        let rows: Vec<usize> = visible
            .iter()
            .enumerate()
            .flat_map(|(b, idx)| idx.iter().map(move |&i| b * n + i))
            .collect();
        let vis = tape.gather_rows(patches, &rows);
        let emb = self.layout.patch_embed.forward(tape, p, vis);
        let enc_pos = p.var(tape, self.layout.enc_pos);
        let pos_rows: Vec<usize> = visible.iter().flatten().copied().collect();
        let pos = tape.gather_rows(enc_pos, &pos_rows);
        let mut x = tape.add(emb, pos);
        for block in &self.layout.enc_blocks {
            x = block
                .forward(tape, p, x, v, self.config.encoder_heads, false)
                .0;
        }
        let x = self.layout.enc_norm.forward(tape, p, x);
        let x = self.layout.dec_embed.forward(tape, p, x);

        let mask_token = p.var(tape, self.layout.mask_token);
        let fill = tape.gather_rows(mask_token, &vec![0; batch * m]);
        let joined = tape.concat_rows(&[x, fill]);
        let mut order = Vec::with_capacity(batch * n);
        for mask in masks {
            let b = order.len() / n;
            let (mut vi, mut mi) = (0, 0);
            for i in 0..n {
                if mask.is_visible(i) {
                    order.push(b * v + vi);
                    vi += 1;
                } else {
                    order.push(batch * v + b * m + mi);
                    mi += 1;
                }
            }
        }
        let tokens = tape.gather_rows(joined, &order);
        let dec_pos = p.var(tape, self.layout.dec_pos);
        let pos = if batch == 1 {
            dec_pos
        } else {
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
            tape.gather_rows(dec_pos, &idx)
        };
        let mut x = tape.add(tokens, pos);
        for block in &self.layout.dec_blocks {
            x = block
                .forward(tape, p, x, n, self.config.decoder_heads, false)
                .0;
        }
        let x = self.layout.dec_norm.forward(tape, p, x);
        self.layout.pred.forward(tape, p, x)
    }

    /// Differentiable `x′ = x ⊙ m + clamp(mae(x ⊙ m)) ⊙ (1 − m)` for one
    /// `N×patch_dim` patch matrix.
    pub(crate) fn reconstruct_tape(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinding,
        patches: Var,
        mask: &MaskSpec,
    ) -> Var {
        let masked = mask.masked_indices();
        if masked.is_empty() {
            return patches;
        }
        let visible = mask.visible_indices();
        let pred = self.predict_tape(tape, p, patches, std::slice::from_ref(mask));
        let kept = tape.gather_rows(patches, &visible);
        let filled = tape.gather_rows(pred, &masked);
        let filled = tape.clamp(filled, 0.0, 1.0);
        let joined = tape.concat_rows(&[kept, filled]);
        let (mut vi, mut mi) = (0, visible.len());
        let order: Vec<usize> = (0..mask.len())
            .map(|i| {
                if mask.is_visible(i) {
                    vi += 1;
                    vi - 1
                } else {
                    mi += 1;
                    mi - 1
                }
            })
            .collect();
        tape.gather_rows(joined, &order)
    }

    fn reconstruct_patches(&self, patches: Matrix, mask: &MaskSpec) -> Result<Matrix> {
        if mask.len() != self.num_patches() {
            return dim_err(format!(
                "mask covers {} patches, MAE expects {}",
                mask.len(),
                self.num_patches()
            ));
        }
        if mask.num_masked() == 0 {
            return Ok(patches);
        }
        self.check_masks(std::slice::from_ref(mask))?;
        let mut tape = Tape::new();
        let mut p = self.store.bind(false);
        let x = tape.constant(patches);
        let out = self.reconstruct_tape(&mut tape, &mut p, x, mask);
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_echo(path, "")
    }

    /// Saves with the pipeline configuration text stored alongside.
    pub fn save_with_echo(&self, path: &Path, echo: &str) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "echo": echo }).to_string();
        store_to_container(CHECKPOINT_KIND, meta, &self.store).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind(CHECKPOINT_KIND)?;
        let meta: serde_json::Value =
            serde_json::from_str(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
        let config: MaeConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::from_parts(config, store_from_container(&c)?)
    }
}

pub fn reconstruct(mae: &MaeModel, x: &Image, mask: &MaskSpec) -> Result<ReconstructionResult> {
    mae.check_geometry(x)?;
    let patches = patchify(x, mae.config.patch_size)?;
    let out = mae.reconstruct_patches(patches.clone(), mask)?;
    let pd = patches.ncols() as f64;
    let masked_patch_loss = mask
        .masked_indices()
        .into_iter()
        .map(|i| {
            let d = &out.row(i) - &patches.row(i);
            d.dot(&d) / pd
        })
        .collect();
    let (h, w, c) = mae.config.geometry();
    let pixels = unpatchify_array(&out, h, w, c, mae.config.patch_size)?;
    Ok(ReconstructionResult {
        x_prime: Image::from_trusted(pixels),
        mask_used: mask.clone(),
        masked_patch_loss,
    })
}

/// Samples a random mask and reconstructs once (half recovery at ratio 0.5).
pub fn half_recover<R: Rng + ?Sized>(
    mae: &MaeModel,
    x: &Image,
    ratio: f64,
    rng: &mut R,
) -> Result<ReconstructionResult> {
    let mask = sample_mask(mae.num_patches(), ratio, MaskStrategy::Random, rng, None)?;
    reconstruct(mae, x, &mask)
}

/// Two complementary passes so every patch is reconstructed exactly once.
/// Returns the image and both masks.
pub fn full_recover_with_masks<R: Rng + ?Sized>(
    mae: &MaeModel,
    x: &Image,
    ratio: f64,
    rng: &mut R,
) -> Result<(Image, MaskSpec, MaskSpec)> {
    if ratio != 0.5 {
        return config_err(format!(
            "complementary full recovery needs ratio 0.5, got {ratio}"
        ));
    }
    let first = sample_mask(mae.num_patches(), ratio, MaskStrategy::Random, rng, None)?;
    let second = first.complement();
    let once = reconstruct(mae, x, &first)?;
    let twice = reconstruct(mae, &once.x_prime, &second)?;
    Ok((twice.x_prime, first, second))
}

pub fn full_recover<R: Rng + ?Sized>(
    mae: &MaeModel,
    x: &Image,
    ratio: f64,
    rng: &mut R,
) -> Result<Image> {
    full_recover_with_masks(mae, x, ratio, rng).map(|(img, _, _)| img)
}

/// Mean squared error over masked patches for a batch (`(B·N)×patch_dim`).
fn masked_mse(tape: &mut Tape, pred: Var, target: Var, masks: &[MaskSpec], n: usize) -> Var {
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.masked_indices().into_iter().map(move |i| b * n + i))
        .collect();
    let p = tape.gather_rows(pred, &rows);
    let t = tape.gather_rows(target, &rows);
    let d = tape.sub(p, t);
    let count = tape.value(d).len() as f64;
    let s = tape.sum_squares(d);
    tape.scale(s, 1.0 / count)
}

/// Mean masked-patch squared error over `images`, each with a fresh random
/// mask drawn from `rng`.
pub fn evaluate_mae<R: Rng + ?Sized>(
    mae: &MaeModel,
    images: &[Image],
    ratio: f64,
    rng: &mut R,
) -> Result<f64> {
    if images.is_empty() {
        return input_err("no images to evaluate");
    }
    let mut total = 0.0;
    for img in images {
        let r = half_recover(mae, img, ratio, rng)?;
        total += r.masked_patch_loss.iter().sum::<f64>() / r.masked_patch_loss.len() as f64;
    }
    Ok(total / images.len() as f64)
}

pub fn train_mae(images: &[Image], config: &MaeConfig, spec: &TrainSpec) -> Result<MaeModel> {
    train_mae_logged(images, config, spec, |_| {})
}

/// Self-supervised training on clean images: MSE on masked patches only,
/// Adam with cosine annealing. Deterministic given `spec.seed`.
pub fn train_mae_logged(
    images: &[Image],
    config: &MaeConfig,
    spec: &TrainSpec,
    mut log: impl FnMut(&EpochLog),
) -> Result<MaeModel> {
    if images.is_empty() {
        return input_err("MAE training set is empty");
    }
    if spec.batch_size == 0 {
        return config_err("batch_size must be positive");
    }
    let mut model = MaeModel::init(config.clone(), spec.seed)?;
    for img in images {
        model.check_geometry(img)?;
    }
    let n = config.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x3ae_3a5c);
    let adam_cfg = AdamConfig {
        weight_decay: spec.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&model.store, adam_cfg);
    let total = images.len().div_ceil(spec.batch_size) * spec.epochs;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let masks = imgs
                .iter()
                .map(|_| sample_mask(n, config.mask_ratio, MaskStrategy::Random, &mut rng, None))
                .collect::<Result<Vec<_>>>()?;
            let patches = stack_patches(&imgs, config.patch_size)?;
            let mut tape = Tape::new();
            let grads = {
                let mut p = model.store.bind(true);
                let x = tape.constant(patches);
                let pred = model.predict_tape(&mut tape, &mut p, x, &masks);
                let loss = masked_mse(&mut tape, pred, x, &masks, n);
                loss_sum += tape.scalar(loss) * chunk.len() as f64;
                p.gradients(&tape.backward(loss))
            };
            let lr = cosine_lr(spec.learning_rate, step, total, spec.warmup_steps);
            adam.step(&mut model.store, &grads, lr);
            step += 1;
        }
        log(&EpochLog {
            epoch,
            mean_loss: loss_sum / images.len() as f64,
            accuracy: None,
        });
    }
    Ok(model)
}

/// Masked-patch batch loss, exposed for diagnostics.
pub fn batch_loss(mae: &MaeModel, images: &[&Image], masks: &[MaskSpec]) -> Result<f64> {
    if images.len() != masks.len() || images.is_empty() {
        return input_err("need one mask per image");
    }
    mae.check_masks(masks)?;
    let patches = stack_patches(images, mae.config.patch_size)?;
    let mut tape = Tape::new();
    let mut p = mae.store.bind(false);
    let x = tape.constant(patches);
    let pred = mae.predict_tape(&mut tape, &mut p, x, masks);
    let loss = masked_mse(&mut tape, pred, x, masks, mae.num_patches());
    Ok(tape.scalar(loss))
}

/// Stacks the rows of `m` selected by `idx` (test helper for patch scans).
pub fn select_patches(m: &Matrix, idx: &[usize]) -> Matrix {
    if idx.is_empty() {
        return Array2::zeros((0, m.ncols()));
    }
    m.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use std::collections::HashSet;

    pub(crate) fn tiny_mae_config() -> MaeConfig {
        MaeConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 2,
            encoder_dim: 8,
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_mlp_dim: 16,
            decoder_dim: 8,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_mlp_dim: 16,
            mask_ratio: 0.5,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, cfg: &MaeConfig) -> Image {
        Image::new(Array3::from_shape_fn(cfg.geometry(), |_| {
            rng.random_range(0.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn mask_count_and_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(196, 0.5, MaskStrategy::Random, &mut rng, None).unwrap();
        assert_eq!(m.num_masked(), 98);
        assert_eq!(m.ratio(), 0.5);
        let m = sample_mask(64, 0.3, MaskStrategy::Random, &mut rng, None).unwrap();
        assert_eq!(m.num_masked(), 19);
        assert!((m.ratio() - 19.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn saliency_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [3.0, 1.0, 2.0, 0.0];
        let m = sample_mask(4, 0.5, MaskStrategy::Salient, &mut rng, Some(&s)).unwrap();
        assert_eq!(m.masked_indices(), vec![0, 2]);
        let m = sample_mask(4, 0.5, MaskStrategy::NonSalient, &mut rng, Some(&s)).unwrap();
        assert_eq!(m.masked_indices(), vec![1, 3]);
        assert!(matches!(
            sample_mask(4, 0.5, MaskStrategy::Salient, &mut rng, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(sample_mask(16, r, MaskStrategy::Random, &mut rng, None).is_err());
        }
    }

    #[test]
    fn masks_are_reproducible_and_seed_sensitive() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_mask(64, 0.5, MaskStrategy::Random, &mut rng, None).unwrap()
        };
        assert_eq!(draw(5), draw(5));
        let distinct: HashSet<Vec<bool>> = (0..1000).map(|s| draw(s).keep().to_vec()).collect();
        assert_eq!(distinct.len(), 1000);
    }

    #[test]
    fn saliency_of_cls_only_attention_is_zero() {
        let n = 4;
        let trace = TransformerTrace {
            raw_attention: vec![{
                let mut a = Array2::zeros((n + 1, n + 1));
                a.column_mut(0).fill(1.0);
                a
            }],
            cls_reps: vec![ndarray::Array1::zeros(2)],
            logits: ndarray::Array1::zeros(2),
        };
        let s = saliency_from_trace(&trace).unwrap();
        assert_eq!(s, vec![0.0; n]);
    }

    #[test]
    fn all_visible_mask_is_identity() {
        let cfg = tiny_mae_config();
        let mae = MaeModel::init(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, &cfg);
        let r = reconstruct(&mae, &x, &MaskSpec::all_visible(16)).unwrap();
        assert_eq!(r.x_prime, x);
        assert!(r.masked_patch_loss.is_empty());
    }

    #[test]
    fn unmasked_patches_are_copied_bit_exactly() {
        let cfg = tiny_mae_config();
        let mae = MaeModel::init(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_image(&mut rng, &cfg);
            let mask = sample_mask(16, 0.5, MaskStrategy::Random, &mut rng, None).unwrap();
            let r = reconstruct(&mae, &x, &mask).unwrap();
            let px = patchify(&x, 2).unwrap();
            let pr = patchify(&r.x_prime, 2).unwrap();
            for i in mask.visible_indices() {
                assert_eq!(px.row(i), pr.row(i));
            }
            assert!(r.x_prime.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.masked_patch_loss.len(), 8);
        }
    }

    #[test]
    fn full_recover_partitions_and_replaces_every_patch() {
        let cfg = tiny_mae_config();
        let mae = MaeModel::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, &cfg);
        let (out, m1, m2) = full_recover_with_masks(&mae, &x, 0.5, &mut rng).unwrap();
        for i in 0..16 {
            assert!(m1.is_visible(i) != m2.is_visible(i));
        }
        let px = patchify(&x, 2).unwrap();
        let po = patchify(&out, 2).unwrap();
        for i in 0..16 {
            assert_ne!(px.row(i), po.row(i), "patch {i} survived verbatim");
        }
        let again = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = random_image(&mut rng, &cfg);
            full_recover(&mae, &x, 0.5, &mut rng).unwrap()
        };
        assert_eq!(again, out);
        assert!(matches!(
            full_recover(&mae, &x, 0.25, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn geometry_mismatch() {
        let mae = MaeModel::init(tiny_mae_config(), 0).unwrap();
        let x = Image::filled(4, 4, 1, 0.5);
        assert!(matches!(
            reconstruct(&mae, &x, &MaskSpec::all_visible(16)),
            Err(Error::Dimension(_))
        ));
        let x = Image::filled(8, 8, 1, 0.5);
        assert!(matches!(
            reconstruct(&mae, &x, &MaskSpec::all_visible(4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = tiny_mae_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Smooth gradients are easy to inpaint.
        let imgs: Vec<Image> = (0..24)
            .map(|_| {
                let a: f64 = rng.random_range(0.1..0.9);
                let b: f64 = rng.random_range(-0.05..0.05);
                Image::clamped(Array3::from_shape_fn((8, 8, 1), |(y, x, _)| {
                    a + b * (x as f64 + y as f64)
                }))
            })
            .collect();
        let zero = TrainSpec {
            epochs: 0,
            seed: 9,
            ..TrainSpec::default()
        };
        let m0 = train_mae(&imgs, &cfg, &zero).unwrap();
        assert_eq!(
            m0.params(),
            MaeModel::init(cfg.clone(), 9).unwrap().params()
        );

        let spec = TrainSpec {
            epochs: 15,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 9,
            ..TrainSpec::default()
        };
        let a = train_mae(&imgs, &cfg, &spec).unwrap();
        let b = train_mae(&imgs, &cfg, &spec).unwrap();
        assert_eq!(a.params(), b.params());

        let held: Vec<Image> = imgs[..8].to_vec();
        let before = evaluate_mae(&m0, &held, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let after = evaluate_mae(&a, &held, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(after < before, "loss {after} not below {before}");
    }

    #[test]
    fn empty_training_set_is_input_error() {
        assert!(matches!(
            train_mae(&[], &tiny_mae_config(), &TrainSpec::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mae = MaeModel::init(tiny_mae_config(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mae.ckpt");
        mae.save(&path).unwrap();
        let back = MaeModel::load(&path).unwrap();
        assert_eq!(back.params(), mae.params());
        assert_eq!(back.config(), mae.config());
    }
}
