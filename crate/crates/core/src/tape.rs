//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with the
//! values it produced. [`Tape::backward`] then walks the record in reverse and
//! accumulates vector-Jacobian products into every tracked leaf. All values
//! are `f64` matrices; scalars are `1×1` matrices.
//!
//! Nodes are only differentiated when at least one of their inputs is
//! tracked, so constant sub-graphs (clean reference images, frozen masks)
//! cost nothing in the backward pass.

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a `1×n` row over every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
    Sqrt(Var),
    Element(Var, usize, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients of a scalar with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(v, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, k), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let t = self.tracked(a);
        self.push(v, Op::Gelu(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let t = self.tracked(a);
        self.push(v, Op::Tanh(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let t = self.tracked(a);
        self.push(v, Op::Relu(a), t)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let t = self.tracked(a);
        self.push(v, Op::Clamp(a, lo, hi), t)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let t = self.tracked(a);
        self.push(v, Op::Softmax(a), t)
    }

    /// Row-wise layer normalization with affine `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / d;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
            inv_std.push(inv);
        }
        let v = &normed * self.value(gamma) + self.value(beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            t,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::SliceRows(a, start), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(a);
        self.push(v, Op::SliceCols(a, start), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    /// Rows of `a` in the given order; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), indices);
        let t = self.tracked(a);
        self.push(v, Op::GatherRows(a, indices.to_vec()), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).fold(0.0, |acc, &x| acc + x * x));
        let t = self.tracked(a);
        self.push(v, Op::SumSquares(a), t)
    }

    /// Elementwise square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let t = self.tracked(a);
        self.push(v, Op::Sqrt(a), t)
    }

    /// Euclidean (Frobenius) distance between two equally shaped values.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.sum_squares(d);
        self.sqrt(sq)
    }

    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        let t = self.tracked(a);
        self.push(v, Op::Element(a, row, col), t)
    }

    /// Mean softmax cross-entropy of `B×K` logits against `B` class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len(), "cross_entropy: batch mismatch");
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
            loss += lse - row[y];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        loss /= targets.len() as f64;
        let t = self.tracked(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
        )
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Array2::zeros(self.value(v).raw_dim()));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.tracked(*b) {
                    self.accumulate(grads, *b, -&g);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, &g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                if self.tracked(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Gelu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let u = GELU_C * (x + GELU_A * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *d *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = y * (*d - dot));
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                if self.tracked(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.tracked(*gamma) {
                    let dg = (&g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.tracked(*x) {
                    let gam = self.value(*gamma).row(0).to_owned();
                    let d = normed.ncols() as f64;
                    let mut dx = g;
                    for ((mut row, nrow), &inv) in
                        dx.rows_mut().into_iter().zip(normed.rows()).zip(inv_std)
                    {
                        row *= &gam;
                        let sum = row.sum();
                        let dot = row.dot(&nrow);
                        Zip::from(&mut row)
                            .and(&nrow)
                            .for_each(|r, &n| *r = inv / d * (d * *r - sum - n * dot));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceRows(a, start) => {
                let n = g.nrows();
                self.accumulate_with(grads, *a, |acc| {
                    let mut view = acc.slice_mut(s![*start..*start + n, ..]);
                    view += &g;
                });
            }
            Op::SliceCols(a, start) => {
                let n = g.ncols();
                self.accumulate_with(grads, *a, |acc| {
                    let mut view = acc.slice_mut(s![.., *start..*start + n]);
                    view += &g;
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, indices) => {
                self.accumulate_with(grads, *a, |acc| {
                    for (grow, &i) in g.rows().into_iter().zip(indices) {
                        let mut row = acc.row_mut(i);
                        row += &grow;
                    }
                });
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                let d = Array2::from_elem(self.value(*a).raw_dim(), k);
                self.accumulate(grads, *a, d);
            }
            Op::SumSquares(a) => {
                let k = 2.0 * g[[0, 0]];
                self.accumulate(grads, *a, self.value(*a) * k);
            }
            Op::Sqrt(a) => {
                let mut d = g;
                Zip::from(&mut d).and(out).for_each(|d, &y| {
                    *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
                });
                self.accumulate(grads, *a, d);
            }
            Op::Element(a, r, c) => {
                let k = g[[0, 0]];
                self.accumulate_with(grads, *a, |acc| acc[[*r, *c]] += k);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = g[[0, 0]] / targets.len() as f64;
                let mut d = probs.clone();
                for (mut row, &y) in d.rows_mut().into_iter().zip(targets) {
                    row[y] -= 1.0;
                }
                d *= k;
                self.accumulate(grads, *logits, d);
            }
        }
    }
}
