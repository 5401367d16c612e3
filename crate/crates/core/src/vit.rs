//! Vision-transformer classifier with full instrumentation.
//!
//! Every forward pass exposes the head-averaged attention map and the CLS
//! representation of each block, and the same graph provides exact input
//! gradients for attack construction.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{config_err, dim_err, input_err, Error, Result};
use crate::image::{num_patches, patchify, unpatchify_array, Image, LabeledDataset};
use crate::layers::{AttentionRecord, Block, LayerNorm, Linear};
use crate::params::{cosine_lr, normal, Adam, AdamConfig, ParamBinding, ParamId, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub mlp_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            num_classes: 10,
            mlp_hidden_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        num_patches(self.image_height, self.image_width, self.patch_size)?;
        if self.channels == 0 {
            return config_err("channels must be positive");
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return config_err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return config_err("num_layers must be at least 1");
        }
        if self.num_classes == 0 || self.mlp_hidden_dim == 0 {
            return config_err("num_classes and mlp_hidden_dim must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.image_height, self.image_width, self.channels)
    }
}

/// Training hyperparameters shared by the classifier and the MAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
}

/// Instrumented outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerTrace {
    /// Head-averaged post-softmax attention per layer, `(N+1)×(N+1)`.
    pub raw_attention: Vec<Matrix>,
    /// CLS row of each block's output.
    pub cls_reps: Vec<Array1<f64>>,
    pub logits: Array1<f64>,
}

impl TransformerTrace {
    pub fn num_layers(&self) -> usize {
        self.raw_attention.len()
    }

    pub fn predicted_label(&self) -> usize {
        argmax(self.logits.as_slice().unwrap())
    }
}

/// Per-layer tape handles of a batched forward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerVars {
    /// CLS rows of the block output, `B×D`.
    pub cls: Var,
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub(crate) struct ForwardVars {
    /// `B×K`
    pub logits: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl Layout {
    fn lookup(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            patch_embed: Linear::lookup(store, "patch_embed")?,
            cls_token: store.require("cls_token")?,
            pos_embed: store.require("pos_embed")?,
            blocks: (0..cfg.num_layers)
                .map(|l| Block::lookup(store, &format!("blocks.{l}")))
                .collect::<Result<_>>()?,
            norm: LayerNorm::lookup(store, "norm")?,
            head: Linear::lookup(store, "head")?,
        })
    }
}

/// A trained (or initialized) ViT classifier. Immutable once built.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

const CHECKPOINT_KIND: &str = "vitguard.classifier";

impl ClassifierModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut store = ParamStore::new();
        Linear::init(&mut store, &mut rng, "patch_embed", config.patch_dim(), d);
        store.add("cls_token", normal(&mut rng, (1, d), 0.02));
        store.add(
            "pos_embed",
            normal(&mut rng, (config.num_tokens(), d), 0.02),
        );
        for l in 0..config.num_layers {
            Block::init(
                &mut store,
                &mut rng,
                &format!("blocks.{l}"),
                d,
                config.mlp_hidden_dim,
            );
        }
        LayerNorm::init(&mut store, "norm", d);
        Linear::init(&mut store, &mut rng, "head", d, config.num_classes);
        let layout = Layout::lookup(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        let store = conform_store(&template.store, &store)?;
        let layout = Layout::lookup(&store, &config)?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access, e.g. for ablations.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn num_patches(&self) -> usize {
        self.config.num_patches()
    }

    pub fn check_geometry(&self, image: &Image) -> Result<()> {
        if image.dims() != self.config.geometry() {
            return dim_err(format!(
                "image {:?} does not match model geometry {:?}",
                image.dims(),
                self.config.geometry()
            ));
        }
        Ok(())
    }

    pub fn patches(&self, image: &Image) -> Result<Matrix> {
        self.check_geometry(image)?;
        patchify(image, self.config.patch_size)
    }

    /// Records the forward pass of `batch` stacked patch matrices
    /// (`(B·N)×patch_dim`).
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinding,
        patches: Var,
        batch: usize,
        record_attention: bool,
    ) -> ForwardVars {
        let n = self.config.num_patches();
        let t = n + 1;
        let emb = self.layout.patch_embed.forward(tape, p, patches);
        let cls = p.var(tape, self.layout.cls_token);
        let pos = p.var(tape, self.layout.pos_embed);

        let mut seqs = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = if batch == 1 {
                emb
            } else {
                tape.slice_rows(emb, b * n, n)
            };
            seqs.push(tape.concat_rows(&[cls, rows]));
        }
        let (tokens, pos_rep) = if batch == 1 {
            (seqs[0], pos)
        } else {
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
            (tape.concat_rows(&seqs), tape.gather_rows(pos, &idx))
        };
        let mut x = tape.add(tokens, pos_rep);

        let cls_rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let mut layers = Vec::with_capacity(self.layout.blocks.len());
        for block in &self.layout.blocks {
            let (out, attention) =
                block.forward(tape, p, x, t, self.config.num_heads, record_attention);
            x = out;
            let cls = tape.gather_rows(x, &cls_rows);
            layers.push(LayerVars { cls, attention });
        }
        let last = layers.last().expect("at least one layer").cls;
        let h = self.layout.norm.forward(tape, p, last);
        let logits = self.layout.head.forward(tape, p, h);
        ForwardVars { logits, layers }
    }

    fn trace_from(tape: &Tape, fwd: &ForwardVars, b: usize) -> TransformerTrace {
        TransformerTrace {
            raw_attention: fwd
                .layers
                .iter()
                .map(|l| {
                    let rec = l.attention.as_ref().expect("attention recorded");
                    tape.value(rec.probs[b]).clone()
                })
                .collect(),
            cls_reps: fwd
                .layers
                .iter()
                .map(|l| tape.value(l.cls).row(b).to_owned())
                .collect(),
            logits: tape.value(fwd.logits).row(b).to_owned(),
        }
    }

    /// Full instrumented forward pass.
    pub fn forward(&self, image: &Image) -> Result<TransformerTrace> {
        let patches = self.patches(image)?;
        let mut tape = Tape::new();
        let mut p = self.store.bind(false);
        let x = tape.constant(patches);
        let fwd = self.forward_tape(&mut tape, &mut p, x, 1, true);
        Ok(Self::trace_from(&tape, &fwd, 0))
    }

    pub fn logits(&self, image: &Image) -> Result<Array1<f64>> {
        let patches = self.patches(image)?;
        let mut tape = Tape::new();
        let mut p = self.store.bind(false);
        let x = tape.constant(patches);
        let fwd = self.forward_tape(&mut tape, &mut p, x, 1, false);
        Ok(tape.value(fwd.logits).row(0).to_owned())
    }

    /// Runs a differentiable objective built on top of the forward pass and
    /// returns its value and gradient with respect to the input pixels.
    pub(crate) fn objective_and_gradient(
        &self,
        image: &Image,
        objective: impl FnOnce(&mut Tape, &ForwardVars) -> Var,
        record_attention: bool,
    ) -> Result<(f64, Array3<f64>)> {
        let patches = self.patches(image)?;
        let mut tape = Tape::new();
        let mut p = self.store.bind(false);
        let x = tape.leaf(patches);
        let fwd = self.forward_tape(&mut tape, &mut p, x, 1, record_attention);
        let loss = objective(&mut tape, &fwd);
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss);
        let g = grads
            .take(x)
            .unwrap_or_else(|| Array2::zeros(tape.value(x).raw_dim()));
        let (h, w, c) = self.config.geometry();
        Ok((
            value,
            unpatchify_array(&g, h, w, c, self.config.patch_size)?,
        ))
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
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::from_parts(config, store_from_container(&c)?)
    }
}

pub(crate) fn store_to_container(kind: &str, meta: String, store: &ParamStore) -> Container {
    let mut c = Container::new(kind, meta);
    for (name, value) in store.iter() {
        let (r, k) = value.dim();
        let data = value.iter().copied().collect();
        c.push(Tensor::new(name, vec![r, k], data).expect("consistent shape"));
    }
    c
}

pub(crate) fn store_from_container(c: &Container) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for t in &c.tensors {
        let [r, k] = t.shape[..] else {
            return Err(Error::Format(format!(
                "parameter `{}` is not 2-D: {:?}",
                t.name, t.shape
            )));
        };
        let m = Array2::from_shape_vec((r, k), t.data.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        store.add(t.name.clone(), m);
    }
    Ok(store)
}

/// Reorders `given` to match `template`, rejecting missing or misshapen
/// tensors.
pub(crate) fn conform_store(template: &ParamStore, given: &ParamStore) -> Result<ParamStore> {
    if template.len() != given.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            template.len(),
            given.len()
        )));
    }
    let mut out = ParamStore::new();
    for (name, want) in template.iter() {
        let value = given.get(given.require(name)?);
        if value.dim() != want.dim() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.dim(),
                want.dim()
            )));
        }
        out.add(name, value.clone());
    }
    Ok(out)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Differentiable objectives for [`loss_and_input_gradient`].
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    CrossEntropy,
    /// CW hinge `max(Z_y − max_{j≠y} Z_j + κ, 0)`.
    CwMargin {
        kappa: f64,
    },
    /// Detection-aware composite objective of the adaptive attack.
    Adaptive(crate::attacks::adaptive::CompositeLoss<'a>),
}

impl LossSpec<'_> {
    /// Parses the loss names accepted by configuration files.
    pub fn from_name(name: &str, kappa: f64) -> Result<LossSpec<'static>> {
        match name {
            "cross-entropy" | "ce" => Ok(LossSpec::CrossEntropy),
            "cw" | "cw-margin" => Ok(LossSpec::CwMargin { kappa }),
            "adaptive" => config_err("the adaptive loss needs an MAE and a mask; build it in code"),
            other => config_err(format!("unknown loss `{other}`")),
        }
    }
}

/// Records the CW hinge for sample 0 of `logits`.
pub(crate) fn cw_hinge(tape: &mut Tape, logits: Var, label: usize, kappa: f64) -> Var {
    let z = tape.value(logits).row(0).to_owned();
    let other = (0..z.len())
        .filter(|&j| j != label)
        .max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a)))
        .expect("at least two classes");
    let zy = tape.element(logits, 0, label);
    let zo = tape.element(logits, 0, other);
    let diff = tape.sub(zy, zo);
    let k = tape.constant(Array2::from_elem((1, 1), kappa));
    let shifted = tape.add(diff, k);
    tape.relu(shifted)
}

/// Loss value and its exact gradient with respect to the input pixels.
pub fn loss_and_input_gradient(
    model: &ClassifierModel,
    image: &Image,
    label: usize,
    loss: &LossSpec,
) -> Result<(f64, Array3<f64>)> {
    if label >= model.config.num_classes {
        return input_err(format!("label {label} outside model classes"));
    }
    match loss {
        LossSpec::CrossEntropy => {
            model.objective_and_gradient(image, |t, f| t.cross_entropy(f.logits, &[label]), false)
        }
        LossSpec::CwMargin { kappa } => {
            if model.config.num_classes < 2 {
                return config_err("CW margin needs at least two classes");
            }
            let kappa = *kappa;
            model.objective_and_gradient(image, |t, f| cw_hinge(t, f.logits, label, kappa), false)
        }
        LossSpec::Adaptive(composite) => composite.value_and_gradient(model, image, label),
    }
}

/// Predicted labels and softmax probabilities.
pub fn predict(model: &ClassifierModel, images: &[Image]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut labels = Vec::with_capacity(images.len());
    let mut probs = Vec::with_capacity(images.len());
    for img in images {
        let logits = model.logits(img)?;
        let z = logits.as_slice().unwrap();
        labels.push(argmax(z));
        probs.push(softmax(z));
    }
    Ok((labels, probs))
}

pub fn predict_one(model: &ClassifierModel, image: &Image) -> Result<usize> {
    Ok(argmax(model.logits(image)?.as_slice().unwrap()))
}

pub fn accuracy(model: &ClassifierModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return input_err("accuracy of an empty dataset");
    }
    let (pred, _) = predict(model, data.images())?;
    let hits = pred
        .iter()
        .zip(data.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub(crate) fn stack_patches(images: &[&Image], patch: usize) -> Result<Matrix> {
    let mats = images
        .iter()
        .map(|im| patchify(im, patch))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

pub fn train_classifier(
    dataset: &LabeledDataset,
    config: &ModelConfig,
    spec: &TrainSpec,
) -> Result<ClassifierModel> {
    train_classifier_logged(dataset, config, spec, |_| {})
}

/// Trains every parameter from scratch with Adam and a cosine schedule.
/// Deterministic given `spec.seed`.
pub fn train_classifier_logged(
    dataset: &LabeledDataset,
    config: &ModelConfig,
    spec: &TrainSpec,
    mut log: impl FnMut(&EpochLog),
) -> Result<ClassifierModel> {
    if dataset.is_empty() {
        return input_err("training set is empty");
    }
    if dataset.num_classes() > config.num_classes {
        return input_err(format!(
            "dataset has {} classes but the model only {}",
            dataset.num_classes(),
            config.num_classes
        ));
    }
    if spec.batch_size == 0 {
        return config_err("batch_size must be positive");
    }
    let mut model = ClassifierModel::init(config.clone(), spec.seed)?;
    for img in dataset.images() {
        model.check_geometry(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let adam_cfg = AdamConfig {
        weight_decay: spec.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&model.store, adam_cfg);
    let steps_per_epoch = dataset.len().div_ceil(spec.batch_size);
    let total = steps_per_epoch * spec.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(spec.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &dataset.images()[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
            let patches = stack_patches(&imgs, config.patch_size)?;
            let mut tape = Tape::new();
            let grads = {
                let mut p = model.store.bind(true);
                let x = tape.constant(patches);
                let fwd = model.forward_tape(&mut tape, &mut p, x, chunk.len(), false);
                let loss = tape.cross_entropy(fwd.logits, &labels);
                loss_sum += tape.scalar(loss) * chunk.len() as f64;
                let z = tape.value(fwd.logits);
                hits += z
                    .rows()
                    .into_iter()
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row.as_slice().unwrap()) == y)
                    .count();
                p.gradients(&tape.backward(loss))
            };
            let lr = cosine_lr(spec.learning_rate, step, total, spec.warmup_steps);
            adam.step(&mut model.store, &grads, lr);
            step += 1;
        }
        log(&EpochLog {
            epoch,
            mean_loss: loss_sum / dataset.len() as f64,
            accuracy: Some(hits as f64 / dataset.len() as f64),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            num_classes: 3,
            mlp_hidden_dim: 16,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Image {
        Image::new(Array3::from_shape_fn(cfg.geometry(), |_| {
            rng.random_range(0.05..0.95)
        }))
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.patch_size = 3;
        assert!(matches!(c.validate(), Err(Error::Dimension(_))));
        let mut c = tiny_config();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_shapes_and_stochastic_rows() {
        let cfg = tiny_config();
        let model = ClassifierModel::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trace = model.forward(&random_image(&mut rng, &cfg)).unwrap();
        assert_eq!(trace.raw_attention.len(), 2);
        assert_eq!(trace.cls_reps.len(), 2);
        assert!(trace.cls_reps.iter().all(|c| c.len() == 8));
        assert_eq!(trace.logits.len(), 3);
        for a in &trace.raw_attention {
            assert_eq!(a.dim(), (5, 5));
            for row in a.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let cfg = tiny_config();
        let model = ClassifierModel::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, &cfg);
        assert_eq!(model.forward(&img).unwrap(), model.forward(&img).unwrap());
    }

    #[test]
    fn geometry_mismatch_is_dimension_error() {
        let model = ClassifierModel::init(tiny_config(), 0).unwrap();
        let img = Image::filled(12, 12, 1, 0.5);
        assert!(matches!(model.forward(&img), Err(Error::Dimension(_))));
        assert!(matches!(predict(&model, &[img]), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_forward_matches_single_forward() {
        let cfg = tiny_config();
        let model = ClassifierModel::init(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, &cfg)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut tape = Tape::new();
        let mut p = model.params().bind(false);
        let x = tape.constant(stack_patches(&refs, 4).unwrap());
        let fwd = model.forward_tape(&mut tape, &mut p, x, 3, true);
        for (b, img) in imgs.iter().enumerate() {
            let single = model.forward(img).unwrap();
            let batched = ClassifierModel::trace_from(&tape, &fwd, b);
            for (a, s) in batched.logits.iter().zip(single.logits.iter()) {
                assert!((a - s).abs() < 1e-12);
            }
            for (a, s) in batched.raw_attention.iter().zip(&single.raw_attention) {
                assert!((a - s).iter().all(|d| d.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn zeroed_sublayers_leave_the_cls_identity_path() {
        let cfg = tiny_config();
        let mut model = ClassifierModel::init(cfg.clone(), 5).unwrap();
        let names: Vec<String> = model
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.contains("attn.proj") || n.contains("mlp.fc2"))
            .collect();
        for n in names {
            let id = model.params().id(&n).unwrap();
            model.params_mut().get_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = model.forward(&random_image(&mut rng, &cfg)).unwrap();
        let cls = model
            .params()
            .get(model.params().id("cls_token").unwrap())
            .row(0)
            .to_owned();
        let pos0 = model
            .params()
            .get(model.params().id("pos_embed").unwrap())
            .row(0)
            .to_owned();
        let expected = &cls + &pos0;
        for rep in &trace.cls_reps {
            assert_eq!(rep, &expected);
        }
    }

    #[test]
    fn constant_logits_give_zero_gradient() {
        let cfg = tiny_config();
        let mut model = ClassifierModel::init(cfg.clone(), 1).unwrap();
        let w = model.params().id("head.weight").unwrap();
        model.params_mut().get_mut(w).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, &cfg);
        let (loss, g) = loss_and_input_gradient(&model, &img, 1, &LossSpec::CrossEntropy).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_matches_recomputed_cross_entropy() {
        let cfg = tiny_config();
        let model = ClassifierModel::init(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, &cfg);
        let (loss, _) = loss_and_input_gradient(&model, &img, 2, &LossSpec::CrossEntropy).unwrap();
        let z = model.forward(&img).unwrap().logits;
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((loss - (lse - z[2])).abs() < 1e-12);
    }

    #[test]
    fn unknown_loss_name_is_config_error() {
        assert!(matches!(
            LossSpec::from_name("hinge2", 0.0),
            Err(Error::Config(_))
        ));
        assert!(LossSpec::from_name("ce", 0.0).is_ok());
    }

    #[test]
    fn predict_probabilities() {
        let cfg = tiny_config();
        let mut model = ClassifierModel::init(cfg.clone(), 1).unwrap();
        let img = Image::filled(8, 8, 1, 0.3);
        let (_, probs) = predict(&model, std::slice::from_ref(&img)).unwrap();
        assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let w = model.params().id("head.weight").unwrap();
        model.params_mut().get_mut(w).fill(0.0);
        let (_, probs) = predict(&model, &[img]).unwrap();
        assert!(probs[0].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn zero_epochs_returns_initialization_and_training_is_deterministic() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs: Vec<Image> = (0..6).map(|_| random_image(&mut rng, &cfg)).collect();
        let data = LabeledDataset::new(imgs, vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let spec = TrainSpec {
            epochs: 0,
            seed: 42,
            ..TrainSpec::default()
        };
        let m0 = train_classifier(&data, &cfg, &spec).unwrap();
        assert_eq!(
            m0.params(),
            ClassifierModel::init(cfg.clone(), 42).unwrap().params()
        );

        let spec = TrainSpec {
            epochs: 2,
            batch_size: 4,
            seed: 42,
            ..TrainSpec::default()
        };
        let a = train_classifier(&data, &cfg, &spec).unwrap();
        let b = train_classifier(&data, &cfg, &spec).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), m0.params());
    }

    #[test]
    fn empty_dataset_is_input_error() {
        let data = LabeledDataset::new(vec![], vec![], 3).unwrap();
        assert!(matches!(
            train_classifier(&data, &tiny_config(), &TrainSpec::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = ClassifierModel::init(tiny_config(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.ckpt");
        model.save(&path).unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
    }
}
