//! Training objectives and the hard-negative queue.
//!
//! Each loss has a value form over plain matrices and, where it is trained
//! through, a graph form. Tests pin the two together and against loop oracles.

use std::collections::VecDeque;

use half::f16;
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::tensor::{l2_norm, Graph, Matrix, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_dir: f64,
    pub lambda_norm: f64,
    pub lambda_contrast: f64,
    pub lambda_nce_aux: f64,
    /// Weight of the `1 − cos` slot/teacher matching term.
    pub lambda_cos_aux: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dir: 0.05,
            lambda_norm: 0.02,
            lambda_contrast: 0.05,
            lambda_nce_aux: 0.01,
            lambda_cos_aux: 0.05,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_dir,
            self.lambda_norm,
            self.lambda_contrast,
            self.lambda_nce_aux,
            self.lambda_cos_aux,
        ];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn normalized_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let n = l2_norm(row.view()).max(crate::tensor::NORM_EPS);
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_batch(p: &Matrix, h: &Matrix, hard: &Matrix) -> Result<()> {
    if p.dim() != h.dim() {
        return Err(Error::Shape(format!(
            "P is {:?} but H is {:?}",
            p.dim(),
            h.dim()
        )));
    }
    if p.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    if hard.nrows() > 0 && hard.ncols() != p.ncols() {
        return Err(Error::Shape("hard negatives differ in dimension".into()));
    }
    if p.nrows() == 1 && hard.nrows() == 0 {
        return Err(Error::NoNegatives);
    }
    Ok(())
}

/// `½[NCE(p→h) + NCE(h→p)]` over cosine similarities at `temperature`.
/// Hard negatives join only the p→h denominators.
pub fn info_nce_symmetric(p: &Matrix, h: &Matrix, hard: &Matrix, temperature: f64) -> Result<f64> {
    check_batch(p, h, hard)?;
    let pn = normalized_rows(p);
    let hn = normalized_rows(h);
    let s = pn.dot(&hn.t()) / temperature;
    let sh = if hard.nrows() > 0 {
        pn.dot(&normalized_rows(hard).t()) / temperature
    } else {
        Matrix::zeros((p.nrows(), 0))
    };
    let n = p.nrows();
    let mut ph = 0.0;
    let mut hp = 0.0;
    for i in 0..n {
        ph += log_sum_exp(s.row(i).iter().chain(sh.row(i).iter()).copied()) - s[[i, i]];
        hp += log_sum_exp(s.column(i).iter().copied()) - s[[i, i]];
    }
    Ok(0.5 * (ph + hp) / n as f64)
}

/// Graph form of [`info_nce_symmetric`]; `hard` enters as a constant.
pub fn info_nce_graph(g: &mut Graph, p: Var, h: Var, hard: &Matrix, temperature: f64) -> Var {
    let n = g.shape(p).0;
    let pn = g.normalize_rows(p);
    let hn = g.normalize_rows(h);
    let s = g.matmul_t(pn, hn);
    let s = g.scale(s, 1.0 / temperature);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    let logits_ph = if hard.nrows() > 0 {
        let hc = g.constant(normalized_rows(hard));
        let sh = g.matmul_t(pn, hc);
        let sh = g.scale(sh, 1.0 / temperature);
        g.concat_cols(&[s, sh])
    } else {
        s
    };
    let ph = g.cross_entropy(logits_ph, &targets);
    let st = g.transpose(s);
    let hp = g.cross_entropy(st, &targets);
    let sum = g.add(ph, hp);
    g.scale(sum, 0.5)
}

/// One-directional InfoNCE: each query row against all candidate rows, the
/// diagonal being the positive.
pub fn info_nce_one_way(q: &Matrix, c: &Matrix, temperature: f64) -> Result<f64> {
    check_batch(q, c, &Matrix::zeros((0, q.ncols())))?;
    let s = normalized_rows(q).dot(&normalized_rows(c).t()) / temperature;
    let n = q.nrows();
    let total: f64 = (0..n)
        .map(|i| log_sum_exp(s.row(i).iter().copied()) - s[[i, i]])
        .sum();
    Ok(total / n as f64)
}

pub fn info_nce_one_way_graph(g: &mut Graph, q: Var, c: Var, temperature: f64) -> Var {
    let n = g.shape(q).0;
    let qn = g.normalize_rows(q);
    let cn = g.normalize_rows(c);
    let s = g.matmul_t(qn, cn);
    let s = g.scale(s, 1.0 / temperature);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    g.cross_entropy(s, &targets)
}

fn nonzero(v: ArrayView1<f64>) -> Result<f64> {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::ZeroNorm)
    }
}

/// `‖p/‖p‖ − h/‖h‖‖²`, which equals `2 − 2·cos(p, h)`.
pub fn direction_loss(p: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
    if p.len() != h.len() {
        return Err(Error::Shape(
            "direction loss on vectors of different length".into(),
        ));
    }
    let (np, nh) = (nonzero(p)?, nonzero(h)?);
    Ok(p.iter()
        .zip(h.iter())
        .map(|(a, b)| (a / np - b / nh).powi(2))
        .sum())
}

/// `(ln‖p‖ − ln‖h‖)²`.
pub fn log_norm_loss(p: ArrayView1<f64>, h: ArrayView1<f64>) -> Result<f64> {
    let (np, nh) = (nonzero(p)?, nonzero(h)?);
    Ok((np.ln() - nh.ln()).powi(2))
}

/// Batch means of the direction and log-norm terms as graph nodes.
pub fn regularizers_graph(g: &mut Graph, p: Var, h: Var) -> (Var, Var) {
    let n = g.shape(p).0 as f64;
    let pn = g.normalize_rows(p);
    let hn = g.normalize_rows(h);
    let d = g.sub(pn, hn);
    let d = g.square(d);
    let d = g.sum(d);
    let dir = g.scale(d, 1.0 / n);
    let lp = g.row_norms(p);
    let lp = g.log(lp);
    let lh = g.row_norms(h);
    let lh = g.log(lh);
    let diff = g.sub(lp, lh);
    let sq = g.square(diff);
    let norm = g.mean(sq);
    (dir, norm)
}

/// `weight · max(0, L_sft − L_zero)`.
pub fn usage_contrast(l_sft: f64, l_zero: f64, weight: f64) -> f64 {
    weight * (l_sft - l_zero).max(0.0)
}

/// Graph form; `l_zero` is detached so only `l_sft` receives gradient.
pub fn usage_contrast_graph(g: &mut Graph, l_sft: Var, l_zero: Var, weight: f64) -> Var {
    let z = g.detach(l_zero);
    let d = g.sub(l_sft, z);
    let r = g.relu(d);
    g.scale(r, weight)
}

/// Components of the slot/teacher auxiliaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLoss {
    /// Batch mean of `1 − cos(mean_slot, teacher)`.
    pub cos_term: f64,
    /// InfoNCE of mean slots against in-batch teachers.
    pub nce_term: f64,
    /// `lambda_cos_aux·cos_term + lambda_nce_aux·nce_term`.
    pub total: f64,
}

/// Mean slot of each `K × d` matrix in `slots` against the teacher row of
/// the same index. A batch of one has no in-batch negatives and a zero
/// InfoNCE term.
pub fn slot_alignment_aux(
    slots: &[Matrix],
    teachers: &Matrix,
    weights: &LossWeights,
) -> Result<AuxLoss> {
    if slots.len() != teachers.nrows() || slots.is_empty() {
        return Err(Error::Shape(format!(
            "{} slot groups for {} teachers",
            slots.len(),
            teachers.nrows()
        )));
    }
    let mut means = Matrix::zeros((slots.len(), teachers.ncols()));
    let mut cos_total = 0.0;
    for (i, s) in slots.iter().enumerate() {
        let m = s.mean_axis(ndarray::Axis(0)).ok_or(Error::EmptySequence)?;
        if m.len() != teachers.ncols() {
            return Err(Error::Shape("slot and teacher dims differ".into()));
        }
        let t = teachers.row(i);
        let nt = nonzero(t)?;
        let nm = nonzero(m.view())?;
        cos_total += 1.0 - m.dot(&t) / (nm * nt);
        means.row_mut(i).assign(&m);
    }
    let cos_term = cos_total / slots.len() as f64;
    let nce_term = if slots.len() > 1 {
        info_nce_one_way(&means, teachers, weights.temperature)?
    } else {
        0.0
    };
    Ok(AuxLoss {
        cos_term,
        nce_term,
        total: weights.lambda_cos_aux * cos_term + weights.lambda_nce_aux * nce_term,
    })
}

/// Graph form over `n × d` mean-slot rows; returns `(cos_term, nce_term)`.
pub fn slot_alignment_aux_graph(
    g: &mut Graph,
    mean_slots: Var,
    teachers: Var,
    temperature: f64,
) -> (Var, Var) {
    let n = g.shape(mean_slots).0;
    let a = g.normalize_rows(mean_slots);
    let b = g.normalize_rows(teachers);
    let prod = g.mul(a, b);
    let cos_sum = g.sum(prod);
    let mean_cos = g.scale(cos_sum, 1.0 / n as f64);
    let one = g.scalar_constant(1.0);
    let cos_term = g.sub(one, mean_cos);
    let nce_term = if n > 1 {
        info_nce_one_way_graph(g, mean_slots, teachers, temperature)
    } else {
        g.scalar_constant(0.0)
    };
    (cos_term, nce_term)
}

/// How stored vectors are ranked against a batch when mining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Score = max over batch rows; one step-level top-k.
    #[default]
    MaxOverBatch,
    /// Union of each batch row's own top-k, ranked by best score.
    PerExample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueConfig {
    pub capacity: usize,
    pub top_k: usize,
    /// Entries whose cosine to any batch row exceeds this are left out of the
    /// mined negatives. `None` disables the guard.
    pub false_negative_cos: Option<f64>,
    pub mode: MiningMode,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: 32768,
            top_k: 256,
            false_negative_cos: Some(0.999),
            mode: MiningMode::MaxOverBatch,
        }
    }
}

/// FIFO of unit-normalised teacher vectors stored as IEEE half floats.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    pub config: QueueConfig,
    dim: usize,
    items: VecDeque<Vec<f16>>,
}

impl NegativeQueue {
    pub fn new(config: QueueConfig, dim: usize) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("queue capacity must be positive".into()));
        }
        Ok(Self {
            config,
            dim,
            items: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stored vectors, oldest first, widened to f64.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_shape_fn((self.items.len(), self.dim), |(r, c)| {
            self.items[r][c].to_f64()
        })
    }

    /// Replaces the contents with `m` (oldest first), rounding to half precision.
    pub fn restore(&mut self, m: &Matrix) -> Result<()> {
        if m.nrows() > 0 && m.ncols() != self.dim {
            return Err(Error::Shape(
                "queue snapshot has the wrong dimension".into(),
            ));
        }
        self.items = m
            .outer_iter()
            .map(|r| r.iter().map(|v| f16::from_f64(*v)).collect())
            .collect();
        while self.items.len() > self.config.capacity {
            self.items.pop_front();
        }
        Ok(())
    }

    /// Appends normalised rows, evicting the oldest beyond capacity. Zero or
    /// non-finite rows are dropped.
    pub fn push(&mut self, batch: &Matrix) -> Result<()> {
        if batch.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "queue dim {}, batch dim {}",
                self.dim,
                batch.ncols()
            )));
        }
        for row in batch.outer_iter() {
            let n = l2_norm(row);
            if !(n > 0.0) || !n.is_finite() {
                log::warn!("queue: dropping degenerate teacher vector");
                continue;
            }
            self.items
                .push_back(row.iter().map(|v| f16::from_f64(v / n)).collect());
            if self.items.len() > self.config.capacity {
                self.items.pop_front();
            }
        }
        Ok(())
    }

    /// Cosine of each stored vector with each batch row: `len × batch`.
    fn scores(&self, batch: &Matrix) -> Matrix {
        let hn = normalized_rows(batch);
        let stored = self.to_matrix();
        let mut s = stored.dot(&hn.t());
        for (mut row, v) in s.outer_iter_mut().zip(stored.outer_iter()) {
            let n = l2_norm(v).max(crate::tensor::NORM_EPS);
            row.mapv_inplace(|x| x / n);
        }
        s
    }

    /// Indices (oldest = 0) of the mined negatives, hardest first. Ties keep
    /// the older entry first.
    pub fn mine_indices(&self, batch: &Matrix) -> Result<Vec<usize>> {
        if self.items.is_empty() || self.config.top_k == 0 {
            return Ok(Vec::new());
        }
        if batch.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "queue dim {}, batch dim {}",
                self.dim,
                batch.ncols()
            )));
        }
        let s = self.scores(batch);
        let best: Vec<f64> = s
            .outer_iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let allowed = |i: usize| match self.config.false_negative_cos {
            Some(t) => best[i] <= t,
            None => true,
        };
        let by_score = |idx: &mut Vec<usize>, score: &dyn Fn(usize) -> f64| {
            idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        };
        let k = self.config.top_k;
        let mut chosen: Vec<usize> = match self.config.mode {
            MiningMode::MaxOverBatch => (0..self.items.len()).filter(|&i| allowed(i)).collect(),
            MiningMode::PerExample => {
                let mut set = std::collections::BTreeSet::new();
                for col in 0..s.ncols() {
                    let mut idx: Vec<usize> =
                        (0..self.items.len()).filter(|&i| allowed(i)).collect();
                    by_score(&mut idx, &|i| s[[i, col]]);
                    set.extend(idx.into_iter().take(k));
                }
                set.into_iter().collect()
            }
        };
        by_score(&mut chosen, &|i| best[i]);
        chosen.truncate(k);
        Ok(chosen)
    }

    /// `min(top_k, len)` hardest stored vectors as rows (fewer if guarded).
    pub fn mine(&self, batch: &Matrix) -> Result<Matrix> {
        let idx = self.mine_indices(batch)?;
        Ok(Matrix::from_shape_fn((idx.len(), self.dim), |(r, c)| {
            self.items[idx[r]][c].to_f64()
        }))
    }
}

/// Functional forms matching the operation names.
pub fn mine_hard_negatives(queue: &NegativeQueue, batch: &Matrix) -> Result<Matrix> {
    queue.mine(batch)
}

pub fn queue_push(mut queue: NegativeQueue, batch: &Matrix) -> Result<NegativeQueue> {
    queue.push(batch)?;
    Ok(queue)
}

/// Row vector helper for single-vector call sites.
pub fn as_row(v: &Array1<f64>) -> Matrix {
    v.clone().insert_axis(ndarray::Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn info_nce_closed_forms() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let empty = Matrix::zeros((0, 2));
        let got = info_nce_symmetric(&eye, &eye, &empty, 0.07).unwrap();
        let want = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((got - want).abs() < 1e-15);
        assert!(want < 7e-7 && want > 6e-7);

        let same = Matrix::from_shape_fn((4, 3), |(_, c)| [0.3, -1.2, 2.0][c]);
        let got = info_nce_symmetric(&same, &same, &Matrix::zeros((0, 3)), 0.07).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-12);

        let one = array![[1.0, 2.0]];
        assert!(matches!(
            info_nce_symmetric(&one, &one, &empty, 0.07),
            Err(Error::NoNegatives)
        ));
    }

    #[test]
    fn info_nce_is_scale_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = random(&mut r, 5, 4);
        let h = random(&mut r, 5, 4);
        let hard = random(&mut r, 3, 4);
        let a = info_nce_symmetric(&p, &h, &hard, 0.1).unwrap();
        let b = info_nce_symmetric(&(&p * 7.5), &h, &hard, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn info_nce_graph_matches_value() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = random(&mut r, 6, 5);
        let h = random(&mut r, 6, 5);
        let hard = random(&mut r, 4, 5);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let hv = g.constant(h.clone());
        let l = info_nce_graph(&mut g, pv, hv, &hard, 0.07);
        assert!((g.scalar(l) - info_nce_symmetric(&p, &h, &hard, 0.07).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regularizer_examples() {
        let p = array![1.0, 0.0];
        let q = array![0.0, 3.0];
        assert_eq!(direction_loss(p.view(), p.view()).unwrap(), 0.0);
        assert!((direction_loss(p.view(), q.view()).unwrap() - 2.0).abs() < 1e-15);
        assert!((direction_loss(p.view(), (-&p).view()).unwrap() - 4.0).abs() < 1e-15);
        assert!(direction_loss(p.view(), array![0.0, 0.0].view()).is_err());

        assert_eq!(
            log_norm_loss(p.view(), array![0.0, 1.0].view()).unwrap(),
            0.0
        );
        let e = std::f64::consts::E;
        assert!((log_norm_loss(array![e, 0.0].view(), p.view()).unwrap() - 1.0).abs() < 1e-15);
        let got = log_norm_loss(array![2.0, 0.0].view(), array![0.0, 8.0].view()).unwrap();
        assert!((got - 0.25f64.ln().powi(2)).abs() < 1e-12);
        assert!((got - 1.922).abs() < 1e-3);
        assert!(log_norm_loss(array![0.0, 0.0].view(), p.view()).is_err());
    }

    #[test]
    fn contrast_examples() {
        assert_eq!(usage_contrast(2.0, 2.5, 0.05), 0.0);
        assert!((usage_contrast(3.0, 2.0, 0.05) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn contrast_gradient_flows_only_through_sft() {
        // Toy composite: L_sft = a², L_zero = b².
        let f = |a: f64, b: f64| {
            let mut g = Graph::new();
            let av = g.param(Matrix::from_elem((1, 1), a));
            let bv = g.param(Matrix::from_elem((1, 1), b));
            let sa = g.square(av);
            let sb = g.square(bv);
            let c = usage_contrast_graph(&mut g, sa, sb, 0.05);
            let grads = g.backward(c);
            let ga = grads.get(av).map(|m| m[[0, 0]]).unwrap_or(0.0);
            let gb = grads.get(bv).map(|m| m[[0, 0]]).unwrap_or(0.0);
            (g.scalar(c), ga, gb)
        };
        let (v, ga, gb) = f(2.0, 1.0);
        assert!((v - 0.05 * 3.0).abs() < 1e-15);
        let h = 1e-6;
        let fd = (f(2.0 + h, 1.0).0 - f(2.0 - h, 1.0).0) / (2.0 * h);
        assert!((fd - ga).abs() / fd.abs() < 1e-6);
        assert_eq!(gb, 0.0);
        let (v, ga, _) = f(1.0, 2.0);
        assert_eq!((v, ga), (0.0, 0.0));
    }

    #[test]
    fn aux_examples() {
        let w = LossWeights::default();
        let t = array![[1.0, 2.0, 3.0]];
        let slots = vec![Matrix::from_shape_fn((4, 3), |(_, c)| t[[0, c]])];
        let a = slot_alignment_aux(&slots, &t, &w).unwrap();
        assert!(a.cos_term.abs() < 1e-15);
        let ortho = vec![array![[3.0, 0.0, -1.0], [3.0, 0.0, -1.0]]];
        let a = slot_alignment_aux(&ortho, &t, &w).unwrap();
        assert!((a.cos_term - 1.0).abs() < 1e-15);
        assert!(slot_alignment_aux(&slots, &array![[0.0, 0.0, 0.0]], &w).is_err());
    }

    #[test]
    fn aux_graph_matches_value() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let w = LossWeights::default();
        let slots: Vec<Matrix> = (0..4).map(|_| random(&mut r, 3, 5)).collect();
        let t = random(&mut r, 4, 5);
        let v = slot_alignment_aux(&slots, &t, &w).unwrap();
        let mut g = Graph::new();
        let means: Vec<Var> = slots
            .iter()
            .map(|s| {
                let c = g.constant(s.clone());
                g.mean_rows(c)
            })
            .collect();
        let m = g.concat_rows(&means);
        let tv = g.constant(t);
        let (c, n) = slot_alignment_aux_graph(&mut g, m, tv, w.temperature);
        assert!((g.scalar(c) - v.cos_term).abs() < 1e-12);
        assert!((g.scalar(n) - v.nce_term).abs() < 1e-12);
    }

    #[test]
    fn regularizers_graph_matches_value() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let p = random(&mut r, 3, 4);
        let h = random(&mut r, 3, 4);
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let hv = g.constant(h.clone());
        let (d, n) = regularizers_graph(&mut g, pv, hv);
        let dv: f64 = (0..3)
            .map(|i| direction_loss(p.row(i), h.row(i)).unwrap())
            .sum::<f64>()
            / 3.0;
        let nv: f64 = (0..3)
            .map(|i| log_norm_loss(p.row(i), h.row(i)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((g.scalar(d) - dv).abs() < 1e-12);
        assert!((g.scalar(n) - nv).abs() < 1e-12);
    }

    fn queue(cap: usize, k: usize, dim: usize) -> NegativeQueue {
        NegativeQueue::new(
            QueueConfig {
                capacity: cap,
                top_k: k,
                false_negative_cos: None,
                mode: MiningMode::MaxOverBatch,
            },
            dim,
        )
        .unwrap()
    }

    #[test]
    fn queue_fifo_and_normalisation() {
        let mut q = queue(4, 2, 2);
        let rows = |xs: &[f64]| {
            Matrix::from_shape_fn((xs.len(), 2), |(r, c)| if c == 0 { xs[r] } else { 1.0 })
        };
        q.push(&rows(&[1.0, 2.0, 3.0])).unwrap();
        q.push(&rows(&[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(q.len(), 4);
        let m = q.to_matrix();
        let firsts: Vec<f64> = m.outer_iter().map(|r| r[0] / r[1]).collect();
        for (got, want) in firsts.iter().zip([3.0, 4.0, 5.0, 6.0]) {
            assert!((got - want).abs() < 1e-2);
        }
        let mut q = queue(4, 2, 2);
        q.push(&array![[3.0, 4.0]]).unwrap();
        assert!((l2_norm(q.to_matrix().row(0)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mining_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut q = queue(10, 2, 4);
        let stored = random(&mut r, 5, 4);
        q.push(&stored).unwrap();
        let batch = random(&mut r, 3, 4);
        let got = q.mine_indices(&batch).unwrap();
        // Brute force: score each stored vector and argsort.
        let m = q.to_matrix();
        let mut scored: Vec<(f64, usize)> = (0..5)
            .map(|i| {
                let best = (0..3)
                    .map(|b| crate::tensor::cosine(m.row(i), batch.row(b)))
                    .fold(f64::NEG_INFINITY, f64::max);
                (best, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(got, vec![scored[0].1, scored[1].1]);

        let mut big = queue(10, 256, 4);
        big.push(&stored).unwrap();
        assert_eq!(big.mine(&batch).unwrap().nrows(), 5);
        assert_eq!(queue(4, 2, 4).mine(&batch).unwrap().nrows(), 0);
    }

    #[test]
    fn equal_vector_ranks_first_and_guard_excludes_it() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let stored = random(&mut r, 6, 8);
        let mut batch = random(&mut r, 2, 8);
        batch.row_mut(1).assign(&stored.row(3));
        let mut q = queue(16, 3, 8);
        q.push(&stored).unwrap();
        assert_eq!(q.mine_indices(&batch).unwrap()[0], 3);
        q.config.false_negative_cos = Some(0.999);
        assert!(!q.mine_indices(&batch).unwrap().contains(&3));
    }

    #[test]
    fn per_example_mode_covers_each_row() {
        let mut q = queue(16, 1, 2);
        q.config.mode = MiningMode::PerExample;
        q.push(&array![[1.0, 0.1], [0.1, 1.0], [-1.0, 0.0]])
            .unwrap();
        let got = q.mine_indices(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(got.len(), 1);
        q.config.top_k = 2;
        let mut got = q.mine_indices(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut q = queue(8, 2, 3);
        q.push(&random(&mut r, 5, 3)).unwrap();
        let mut back = queue(8, 2, 3);
        back.restore(&q.to_matrix()).unwrap();
        assert_eq!(back, q);
    }

    proptest! {
        #[test]
        fn losses_are_finite_and_nonnegative(seed in 0u64..500) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = random(&mut r, 4, 3);
            let h = random(&mut r, 4, 3);
            let hard = random(&mut r, 2, 3);
            let l = info_nce_symmetric(&p, &h, &hard, 0.07).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
            let d1 = direction_loss(p.row(0), h.row(0)).unwrap();
            let d2 = direction_loss(h.row(0), p.row(0)).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            let cos = crate::tensor::cosine(p.row(0), h.row(0));
            prop_assert!((d1 - (2.0 - 2.0 * cos)).abs() < 1e-12);
            let n1 = log_norm_loss(p.row(1), h.row(1)).unwrap();
            let n2 = log_norm_loss(h.row(1), p.row(1)).unwrap();
            prop_assert!((n1 - n2).abs() < 1e-12 && n1 >= 0.0);
        }

        #[test]
        fn contrast_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, z in -10.0f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(usage_contrast(lo, z, 0.05) <= usage_contrast(hi, z, 0.05));
        }
    }
}
