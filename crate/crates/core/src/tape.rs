//! Minimal reverse-mode autodiff over dense 2-D arrays.
//!
//! The decoder and its losses are built from a small fixed op set, recorded
//! eagerly on a tape and differentiated by a single reverse sweep. Scalars
//! are `1x1` arrays, vectors are `Nx1` or `1xM`, masks live flattened as
//! `N x (H*W)`. Everything is `f64`; gradient correctness is enforced by
//! finite-difference tests at the op level and for the full model.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// (N,M) + (1,M), broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    /// (N,M) * (1,1) scalar variable.
    MulScalar(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    /// Row-wise softmax restricted to `allowed` cells (exact zeros outside);
    /// rows with no allowed cell fall back to the full softmax.
    MaskedSoftmaxRows(usize, Array2<bool>),
    LogSoftmaxRows(usize),
    Sigmoid(usize),
    Gelu(usize),
    Exp(usize),
    SumAll(usize),
    SumRows(usize),
    L2NormalizeRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize },
    UpsampleBilinear { x: usize, plan: UpsamplePlan },
    ConcatCols(usize, usize),
    /// Scalar `sum(w * (max(z,0) - z*t + ln(1+exp(-|z|))))`.
    BceWithLogits { logits: usize, targets: Array2<f64>, weights: Array2<f64> },
}

#[derive(Debug)]
pub struct UpsamplePlan {
    low: (usize, usize),
    high: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl UpsamplePlan {
    pub fn new(low: (usize, usize), high: (usize, usize)) -> Self {
        let (lh, lw) = low;
        let (hh, hw) = high;
        let mut taps = Vec::with_capacity(hh * hw);
        for r in 0..hh {
            let sy = ((r as f64 + 0.5) * lh as f64 / hh as f64 - 0.5).clamp(0.0, (lh - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(lh - 1);
            let dy = sy - y0 as f64;
            for c in 0..hw {
                let sx =
                    ((c as f64 + 0.5) * lw as f64 / hw as f64 - 0.5).clamp(0.0, (lw - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(lw - 1);
                let dx = sx - x0 as f64;
                taps.push([
                    (y0 * lw + x0, (1.0 - dy) * (1.0 - dx)),
                    (y0 * lw + x1, (1.0 - dy) * dx),
                    (y1 * lw + x0, dy * (1.0 - dx)),
                    (y1 * lw + x1, dy * dx),
                ]);
            }
        }
        UpsamplePlan { low, high, taps }
    }
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.dim().0, 1);
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * factor);
        self.push(value, Op::Scale(a.0, factor))
    }

    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Var {
        debug_assert_eq!(self.nodes[scalar.0].value.dim(), (1, 1));
        let s = self.nodes[scalar.0].value[[0, 0]];
        let value = self.nodes[a.0].value.mapv(|v| v * s);
        self.push(value, Op::MulScalar(a.0, scalar.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    /// Shared softmax kernel: exact zeros on masked cells, sequential
    /// summation so the masked all-true fallback is bitwise identical to
    /// the unmasked path.
    fn softmax_values(x: &Array2<f64>, allowed: Option<&Array2<bool>>) -> Array2<f64> {
        let mut value = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let is_allowed = |j: usize| allowed.map_or(true, |m| m[[i, j]]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if is_allowed(j) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if is_allowed(j) {
                    let e = (v - max).exp();
                    value[[i, j]] = e;
                    sum += e;
                }
            }
            for j in 0..row.len() {
                value[[i, j]] /= sum;
            }
        }
        value
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = Self::softmax_values(&self.nodes[a.0].value, None);
        self.push(value, Op::SoftmaxRows(a.0))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, allowed: Array2<bool>) -> Var {
        let x = &self.nodes[a.0].value;
        debug_assert_eq!(x.dim(), allowed.dim());
        // rows with no allowed cell fall back to full attention
        let mut effective = allowed;
        for mut row in effective.rows_mut() {
            if !row.iter().any(|&m| m) {
                row.fill(true);
            }
        }
        let value = Self::softmax_values(x, Some(&effective));
        self.push(value, Op::MaskedSoftmaxRows(a.0, effective))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|v| v - lse);
        }
        self.push(value, Op::LogSoftmaxRows(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        });
        self.push(value, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut value = Array2::zeros((1, 1));
        value[[0, 0]] = self.nodes[a.0].value.sum();
        self.push(value, Op::SumAll(a.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let sums = self.nodes[a.0].value.sum_axis(Axis(1));
        let n = sums.len();
        let value = sums.into_shape_with_order((n, 1)).unwrap();
        self.push(value, Op::SumRows(a.0))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        self.push(value, Op::L2NormalizeRows(a.0))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let input = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let (n, m) = input.dim();
        debug_assert_eq!(g.dim(), (1, m));
        debug_assert_eq!(b.dim(), (1, m));
        let mut value = Array2::zeros((n, m));
        for i in 0..n {
            let row = input.row(i);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..m {
                value[[i, j]] = (input[[i, j]] - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(value, Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0 })
    }

    pub fn upsample_bilinear(&mut self, a: Var, plan: UpsamplePlan) -> Var {
        let x = &self.nodes[a.0].value;
        let (n, low_len) = x.dim();
        debug_assert_eq!(low_len, plan.low.0 * plan.low.1);
        let high_len = plan.high.0 * plan.high.1;
        let mut value = Array2::zeros((n, high_len));
        for i in 0..n {
            let row = x.row(i);
            for (p, taps) in plan.taps.iter().enumerate() {
                let mut acc = 0.0;
                for &(idx, w) in taps {
                    acc += row[idx] * w;
                }
                value[[i, p]] = acc;
            }
        }
        self.push(value, Op::UpsampleBilinear { x: a.0, plan })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let left = &self.nodes[a.0].value;
        let right = &self.nodes[b.0].value;
        debug_assert_eq!(left.dim().0, right.dim().0);
        let (n, la) = left.dim();
        let lb = right.dim().1;
        let mut value = Array2::zeros((n, la + lb));
        value.slice_mut(ndarray::s![.., ..la]).assign(left);
        value.slice_mut(ndarray::s![.., la..]).assign(right);
        self.push(value, Op::ConcatCols(a.0, b.0))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>, weights: Array2<f64>) -> Var {
        let z = &self.nodes[logits.0].value;
        debug_assert_eq!(z.dim(), targets.dim());
        debug_assert_eq!(z.dim(), weights.dim());
        let mut acc = 0.0;
        for ((&z, &t), &w) in z.iter().zip(targets.iter()).zip(weights.iter()) {
            if w != 0.0 {
                acc += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
            }
        }
        let mut value = Array2::zeros((1, 1));
        value[[0, 0]] = acc;
        self.push(value, Op::BceWithLogits { logits: logits.0, targets, weights })
    }

    /// Reverse sweep from a `1x1` loss node. Gradients accumulate in every
    /// node; read them back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        for node in self.nodes.iter_mut() {
            node.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[[0, 0]] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let grad = self.nodes[i].grad.clone();
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad += &grad;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.nodes[a].grad += &grad;
                    self.nodes[b].grad -= &grad;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &grad * &self.nodes[b].value;
                    let db = &grad * &self.nodes[a].value;
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &grad / &self.nodes[b].value;
                    let db = -&(&grad * &self.nodes[i].value) / &self.nodes[b].value;
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    self.nodes[a].grad += &grad;
                    let col_sums = grad.sum_axis(Axis(0));
                    let m = col_sums.len();
                    let col_sums = col_sums.into_shape_with_order((1, m)).unwrap();
                    self.nodes[row].grad += &col_sums;
                }
                Op::Scale(a, factor) => {
                    let (a, factor) = (*a, *factor);
                    let da = grad.mapv(|g| g * factor);
                    self.nodes[a].grad += &da;
                }
                Op::MulScalar(a, scalar) => {
                    let (a, scalar) = (*a, *scalar);
                    let s = self.nodes[scalar].value[[0, 0]];
                    let da = grad.mapv(|g| g * s);
                    let ds = (&grad * &self.nodes[a].value).sum();
                    self.nodes[a].grad += &da;
                    self.nodes[scalar].grad[[0, 0]] += ds;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = grad.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&grad);
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let da = grad.t().to_owned();
                    self.nodes[a].grad += &da;
                }
                Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a, _) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for (r, (yrow, grow)) in
                        y.rows().into_iter().zip(grad.rows()).enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&y, &g)| y * g).sum();
                        for (c, (&y, &g)) in yrow.iter().zip(grow.iter()).enumerate() {
                            da[[r, c]] = y * (g - dot);
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::LogSoftmaxRows(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for (r, (yrow, grow)) in
                        y.rows().into_iter().zip(grad.rows()).enumerate()
                    {
                        let gsum: f64 = grow.iter().sum();
                        for (c, (&y, &g)) in yrow.iter().zip(grow.iter()).enumerate() {
                            da[[r, c]] = g - y.exp() * gsum;
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let da = &grad * &self.nodes[i].value.mapv(|y| y * (1.0 - y));
                    self.nodes[a].grad += &da;
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let da = Array2::from_shape_fn(x.raw_dim(), |idx| {
                        let x = x[idx];
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        grad[idx] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    self.nodes[a].grad += &da;
                }
                Op::Exp(a) => {
                    let a = *a;
                    let da = &grad * &self.nodes[i].value;
                    self.nodes[a].grad += &da;
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let g = grad[[0, 0]];
                    let da = Array2::from_elem(self.nodes[a].value.raw_dim(), g);
                    self.nodes[a].grad += &da;
                }
                Op::SumRows(a) => {
                    let a = *a;
                    let (n, m) = self.nodes[a].value.dim();
                    let da = Array2::from_shape_fn((n, m), |(r, _)| grad[[r, 0]]);
                    self.nodes[a].grad += &da;
                }
                Op::L2NormalizeRows(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(x.raw_dim());
                    for (r, xrow) in x.rows().into_iter().enumerate() {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let dot: f64 = y
                            .row(r)
                            .iter()
                            .zip(grad.row(r).iter())
                            .map(|(&y, &g)| y * g)
                            .sum();
                        for c in 0..xrow.len() {
                            da[[r, c]] = (grad[[r, c]] - y[[r, c]] * dot) / norm;
                        }
                    }
                    self.nodes[a].grad += &da;
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let input = &self.nodes[x].value;
                    let g = &self.nodes[gain].value;
                    let (n, m) = input.dim();
                    let mut dx = Array2::zeros((n, m));
                    let mut dgain = Array2::zeros((1, m));
                    let mut dbias = Array2::zeros((1, m));
                    for r in 0..n {
                        let row = input.row(r);
                        let mean = row.sum() / m as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // dL/dxhat per column, then the standard layer-norm pullback
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; m];
                        let mut dxhat = vec![0.0; m];
                        for c in 0..m {
                            xhat[c] = (input[[r, c]] - mean) * inv;
                            dxhat[c] = grad[[r, c]] * g[[0, c]];
                            sum_dxhat += dxhat[c];
                            sum_dxhat_xhat += dxhat[c] * xhat[c];
                            dgain[[0, c]] += grad[[r, c]] * xhat[c];
                            dbias[[0, c]] += grad[[r, c]];
                        }
                        for c in 0..m {
                            dx[[r, c]] = inv
                                * (dxhat[c]
                                    - sum_dxhat / m as f64
                                    - xhat[c] * sum_dxhat_xhat / m as f64);
                        }
                    }
                    self.nodes[x].grad += &dx;
                    self.nodes[gain].grad += &dgain;
                    self.nodes[bias].grad += &dbias;
                }
                Op::UpsampleBilinear { x, plan } => {
                    let x = *x;
                    let (n, low_len) = self.nodes[x].value.dim();
                    let mut da = Array2::zeros((n, low_len));
                    for r in 0..n {
                        for (p, taps) in plan.taps.iter().enumerate() {
                            let g = grad[[r, p]];
                            if g != 0.0 {
                                for &(idx, w) in taps {
                                    da[[r, idx]] += g * w;
                                }
                            }
                        }
                    }
                    self.nodes[x].grad += &da;
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let la = self.nodes[a].value.dim().1;
                    let da = grad.slice(ndarray::s![.., ..la]).to_owned();
                    let db = grad.slice(ndarray::s![.., la..]).to_owned();
                    self.nodes[a].grad += &da;
                    self.nodes[b].grad += &db;
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let logits = *logits;
                    let g = grad[[0, 0]];
                    let z = &self.nodes[logits].value;
                    let da = Array2::from_shape_fn(z.raw_dim(), |idx| {
                        let w = weights[idx];
                        if w == 0.0 {
                            0.0
                        } else {
                            g * w * (stable_sigmoid(z[idx]) - targets[idx])
                        }
                    });
                    self.nodes[logits].grad += &da;
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
