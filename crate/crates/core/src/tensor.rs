//! Dense `f64` matrices and a small tape-based reverse-mode differentiator.
//!
//! Every value is a 2-D matrix; scalars are `1 × 1`. A [`Graph`] records
//! operations in construction order, so nodes are already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters live in a [`ParamSet`] (name → matrix). Binding a set into a
//! graph either as trainable leaves or as constants is what separates the
//! trainable adapters from the frozen encoder and decoder.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use sha2::{Digest, Sha256};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Square(Var),
    RmsNorm(Var, f64),
    LayerNorm(Var, f64),
    NormalizeRows(Var),
    RowNorms(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        rows: Var,
        positions: Vec<usize>,
    },
    Softmax(Var),
    Rope {
        x: Var,
        head_dim: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub const NORM_EPS: f64 = 1e-12;

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rope_angle(pos: usize, pair: usize, head_dim: usize) -> f64 {
    let theta = 10000f64.powf(-2.0 * pair as f64 / head_dim as f64);
    pos as f64 * theta
}

/// Rotates consecutive column pairs of every head by position-dependent
/// angles. `sign = -1.0` applies the inverse rotation.
fn rope_apply(x: &Matrix, head_dim: usize, sign: f64) -> Matrix {
    let mut out = x.clone();
    let (rows, cols) = x.dim();
    for r in 0..rows {
        for head in 0..cols / head_dim {
            for pair in 0..head_dim / 2 {
                let (sin, cos) = (sign * rope_angle(r, pair, head_dim)).sin_cos();
                let c0 = head * head_dim + 2 * pair;
                let (a, b) = (x[[r, c0]], x[[r, c0 + 1]]);
                out[[r, c0]] = a * cos - b * sin;
                out[[r, c0 + 1]] = a * sin + b * cos;
            }
        }
    }
    out
}

fn softmax_rows(x: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(x.dim());
    for (r, row) in x.outer_iter().enumerate() {
        let width = if causal {
            (r + 1).min(row.len())
        } else {
            row.len()
        };
        let max = row
            .iter()
            .take(width)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..width {
            let e = (row[c] - max).exp();
            out[[r, c]] = e;
            total += e;
        }
        for c in 0..width {
            out[[r, c]] /= total;
        }
    }
    out
}

fn row_mean_var(row: ndarray::ArrayView1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let value = self.value(a) * self.scalar(s);
        let rg = self.rg(&[a, s]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`, no gain and no bias.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RmsNorm(a, eps), rg)
    }

    /// Row-wise non-affine LayerNorm.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let (mean, var) = row_mean_var(row.view());
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNorm(a, eps), rg)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let n = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::NormalizeRows(a), rg)
    }

    /// `n × 1` column of row L2 norms.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_shape_fn((x.nrows(), 1), |(r, _)| {
            let row = x.row(r);
            row.dot(&row).sqrt()
        });
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorms(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Copy of `base` with row `positions[i]` replaced by row `i` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, positions: &[usize]) -> Var {
        let mut value = self.value(base).clone();
        let src = self.value(rows);
        for (i, &p) in positions.iter().enumerate() {
            value.row_mut(p).assign(&src.row(i));
        }
        let rg = self.rg(&[base, rows]);
        self.push(
            value,
            Op::ScatterRows {
                base,
                rows,
                positions: positions.to_vec(),
            },
            rg,
        )
    }

    /// Row softmax. With `causal`, row `r` only covers columns `0..=r`
    /// and the rest are exactly zero.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let value = softmax_rows(self.value(a), causal);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Rotary position embedding over heads of width `head_dim`; row index is the position.
    pub fn rope(&mut self, a: Var, head_dim: usize) -> Var {
        let value = rope_apply(self.value(a), head_dim, 1.0);
        let rg = self.rg(&[a]);
        self.push(value, Op::Rope { x: a, head_dim }, rg)
    }

    /// `1 × m` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_elem((1, 1), x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean cross-entropy over rows that carry a target; rows with `None`
    /// are masked out. Panics if no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target slot per logit row");
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = x.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        assert!(count > 0, "cross_entropy needs at least one target");
        let value = Matrix::from_elem((1, 1), total / count as f64);
        let rg = self.rg(&[logits]);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::ones(self.value(out).dim()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.dot(self.value(*b)));
                acc(*b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * self.value(*row));
                acc(
                    *row,
                    (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::MulScalar(a, s) => {
                acc(*a, g * self.scalar(*s));
                let ds = (g * self.value(*a)).sum();
                acc(*s, Matrix::from_elem((1, 1), ds));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |dv, &xv| *dv *= gelu_grad(xv));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |dv, &xv| {
                    if xv <= 0.0 {
                        *dv = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Square(a) => acc(*a, g * self.value(*a) * 2.0),
            Op::RmsNorm(a, eps) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let inv = 1.0 / (xr.dot(&xr) / n + eps).sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = gr.dot(&yr) / n;
                    for c in 0..xr.len() {
                        d[[r, c]] = (gr[c] - yr[c] * proj) * inv;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for r in 0..x.nrows() {
                    let (_, var) = row_mean_var(x.row(r));
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let n = yr.len() as f64;
                    let gmean = gr.sum() / n;
                    let proj = gr.dot(&yr) / n;
                    for c in 0..yr.len() {
                        d[[r, c]] = (gr[c] - gmean - yr[c] * proj) * inv;
                    }
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.dot(&xr).sqrt().max(NORM_EPS);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = gr.dot(&yr);
                    for c in 0..xr.len() {
                        d[[r, c]] = (gr[c] - yr[c] * proj) / n;
                    }
                }
                acc(*a, d);
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let mut d = Matrix::zeros(x.dim());
                for r in 0..x.nrows() {
                    let n = y[[r, 0]].max(NORM_EPS);
                    for c in 0..x.ncols() {
                        d[[r, c]] = g[[r, 0]] * x[[r, c]] / n;
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::SliceCols(a, start) => {
                let mut d = Matrix::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    acc(*p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut d = Matrix::zeros(self.value(*a).dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                acc(*a, d);
            }
            Op::ScatterRows {
                base,
                rows,
                positions,
            } => {
                let mut db = g.clone();
                let mut dr = Matrix::zeros(self.value(*rows).dim());
                for (i, &p) in positions.iter().enumerate() {
                    dr.row_mut(i).assign(&g.row(p));
                    db.row_mut(p).fill(0.0);
                }
                acc(*base, db);
                acc(*rows, dr);
            }
            Op::Softmax(x) => {
                let mut d = Matrix::zeros(y.dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    for c in 0..yr.len() {
                        d[[r, c]] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, d);
            }
            Op::Rope { x, head_dim } => acc(*x, rope_apply(g, *head_dim, -1.0)),
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let row = g.row(0).mapv(|v| v / n as f64);
                let d = row
                    .broadcast((n, g.ncols()))
                    .expect("broadcast row")
                    .to_owned();
                acc(*a, d);
            }
            Op::Sum(a) => acc(*a, Matrix::from_elem(self.value(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let x = self.value(*a);
                acc(*a, Matrix::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            Op::CrossEntropy { logits, targets } => {
                let x = self.value(*logits);
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g[[0, 0]] / count;
                let mut d = Matrix::zeros(x.dim());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = x.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..row.len() {
                        d[[r, c]] = (row[c] - max).exp() / total * scale;
                    }
                    d[[r, t]] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}

/// Named collection of parameter matrices with deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Matrix>,
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient per bound name; zeros where nothing flowed.
    pub fn grads(&self, graph: &Graph, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.vars {
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(graph.shape(*v)));
            out.insert(name, g);
        }
        out
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.insert(name.into(), m);
    }

    pub fn get(&self, name: &str) -> &Matrix {
        match self.entries.get(name) {
            Some(m) => m,
            None => panic!("missing parameter `{name}`"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        match self.entries.get_mut(name) {
            Some(m) => m,
            None => panic!("missing parameter `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Merges `other` with every name prefixed by `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Sub-set of entries whose name starts with `prefix`, prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, m)| {
                let v = if trainable {
                    graph.param(m.clone())
                } else {
                    graph.constant(m.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

pub fn l2_norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.dot(&b) / (l2_norm(a) * l2_norm(b))
}
