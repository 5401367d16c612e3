//! Named parameter storage, tape binding, initialization and optimizers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Matrix, Tape, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.values.iter_mut()
    }

    /// Binds this store to a tape; `track` decides whether gradients flow
    /// into the parameters.
    pub fn bind(&self, track: bool) -> ParamBinding<'_> {
        ParamBinding {
            store: self,
            vars: vec![None; self.values.len()],
            track,
        }
    }
}

/// Lazily materializes parameters as tape leaves, one leaf per tensor.
#[derive(Debug)]
pub struct ParamBinding<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl ParamBinding<'_> {
    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.track {
            tape.leaf(value)
        } else {
            tape.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-tensor gradients in store order; unused tensors get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(v, value)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(value.raw_dim()))
            })
            .collect()
    }
}

pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

/// Adam moments for one tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    t: i32,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    /// One descent step on `param` (decoupled weight decay).
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut Matrix, grad: &Matrix, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p -= lr * (update + cfg.weight_decay * *p);
            });
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let states = store
            .values
            .iter()
            .map(|v| AdamState::new(v.dim()))
            .collect();
        Self { cfg, states }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), self.states.len());
        for ((state, param), grad) in self.states.iter_mut().zip(store.values_mut()).zip(grads) {
            state.step(&self.cfg, param, grad, lr);
        }
    }
}

/// Cosine-annealed learning rate with linear warmup, decaying to zero at
/// `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0), 1.0);
        assert!(cosine_lr(1.0, 100, 100, 0).abs() < 1e-15);
        assert!((cosine_lr(1.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(2.0, 4, 100, 5) - 2.0).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_lr(1.0, s, 100, 0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ndarray::array![[3.0, -2.0]];
        let mut st = AdamState::new((1, 2));
        for _ in 0..2000 {
            let g = &p * 2.0;
            st.step(&AdamConfig::default(), &mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn binding_reports_zero_gradient_for_unused_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add("a", normal(&mut rng, (2, 2), 1.0));
        store.add("unused", Array2::ones((1, 3)));
        let mut tape = Tape::new();
        let mut bind = store.bind(true);
        let av = bind.var(&mut tape, a);
        let s = tape.sum_squares(av);
        let grads = bind.gradients(&tape.backward(s));
        assert_eq!(grads[0], store.get(a) * 2.0);
        assert!(grads[1].iter().all(|v| *v == 0.0));
        assert_eq!(grads[1].dim(), (1, 3));
    }
}
