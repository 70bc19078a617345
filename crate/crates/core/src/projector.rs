//! Trainable bridge parameters: the Stage A projector `g`, the Stage B slot
//! expander with its learned scale, and the per-vector adapter.
//!
//! Every component has a graph form used by the trainers and a plain value
//! form for inference.

use ndarray::{Array1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::models::{slot_token, FrozenDecoder, ReservedTokens, Tokenizer};
use crate::tensor::{Bound, Graph, Matrix, ParamSet, Var};
use crate::{Error, Result};

/// Epsilon of the projector's closing LayerNorm.
pub const LN_EPS: f64 = 1e-5;
/// Epsilon of the slot LayerNorm. Inputs are unit vectors pushed through an
/// affine map, so per-row variance is O(1/dim); a larger epsilon would pull
/// slot norms visibly below `|scale|·√dim`.
pub const SLOT_LN_EPS: f64 = 1e-12;

fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn row_matrix(v: &Array1<f64>) -> Matrix {
    v.clone().insert_axis(Axis(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub encoder_dim: usize,
    pub hidden: usize,
    pub decoder_dim: usize,
    pub dropout: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            encoder_dim: 768,
            hidden: 3072,
            decoder_dim: 2048,
            dropout: 0.10,
        }
    }
}

/// `g(z) = LayerNorm(W2 · Dropout(GELU(W1 z + b1)) + b2)` with affine LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorState {
    pub config: ProjectorConfig,
    pub params: ParamSet,
}

impl ProjectorState {
    pub fn new(config: ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.encoder_dim == 0 || config.hidden == 0 || config.decoder_dim == 0 {
            return Err(Error::Config("projector dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                config.dropout
            )));
        }
        let mut params = ParamSet::new();
        let (e, h, d) = (config.encoder_dim, config.hidden, config.decoder_dim);
        params.insert("w1", normal(e, h, 1.0 / (e as f64).sqrt(), rng));
        params.insert("b1", Matrix::zeros((1, h)));
        params.insert("w2", normal(h, d, 1.0 / (h as f64).sqrt(), rng));
        params.insert("b2", Matrix::zeros((1, d)));
        params.insert("ln_gain", Matrix::ones((1, d)));
        params.insert("ln_bias", Matrix::zeros((1, d)));
        Ok(Self { config, params })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Inverted-dropout mask for a batch of `rows` inputs.
    pub fn dropout_mask(&self, rows: usize, rng: &mut impl Rng) -> Matrix {
        let p = self.config.dropout;
        Matrix::from_shape_fn((rows, self.config.hidden), |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                1.0 / (1.0 - p)
            }
        })
    }

    /// Batched forward over `z` rows (`n × encoder_dim`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        w: &Bound,
        z: Var,
        dropout_mask: Option<&Matrix>,
    ) -> Var {
        let h = g.matmul(z, w.get("w1"));
        let h = g.add_row(h, w.get("b1"));
        let mut h = g.gelu(h);
        if let Some(mask) = dropout_mask {
            let m = g.constant(mask.clone());
            h = g.mul(h, m);
        }
        let o = g.matmul(h, w.get("w2"));
        let o = g.add_row(o, w.get("b2"));
        let o = g.layer_norm(o, LN_EPS);
        let o = g.mul_row(o, w.get("ln_gain"));
        g.add_row(o, w.get("ln_bias"))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.config.encoder_dim {
            return Err(Error::Shape(format!(
                "projector expects encoder_dim {}, got {cols}",
                self.config.encoder_dim
            )));
        }
        Ok(())
    }

    /// `p_F = g(z_F)`. With `training`, dropout draws from `rng`.
    pub fn project(
        &self,
        z: &Array1<f64>,
        training: Option<&mut dyn rand::RngCore>,
    ) -> Result<Array1<f64>> {
        let out = self.project_batch(&row_matrix(z), training)?;
        Ok(out.row(0).to_owned())
    }

    pub fn project_batch(
        &self,
        z: &Matrix,
        training: Option<&mut dyn rand::RngCore>,
    ) -> Result<Matrix> {
        self.check_input(z.ncols())?;
        let mask = training.map(|r| self.dropout_mask(z.nrows(), &mut &mut *r));
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, &w, zv, mask.as_ref());
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "projector",
            serde_json::json!({ "config": self.config }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "projector" {
            return Err(Error::Checkpoint(format!(
                "expected projector, found {}",
                ck.kind
            )));
        }
        Ok(Self {
            config: ck.meta_field("config")?,
            params: ck.params.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpanderConfig {
    pub dim: usize,
    pub slots: usize,
    /// Std of the noise added to each identity-initialised slot map, relative
    /// to `1/√dim`.
    pub init_noise: f64,
    /// Bottleneck width of the vector adapter.
    pub adapter_bottleneck: usize,
}

impl Default for ExpanderConfig {
    fn default() -> Self {
        Self {
            dim: 2048,
            slots: 8,
            init_noise: 0.5,
            adapter_bottleneck: 256,
        }
    }
}

/// K affine maps followed by unit-normalisation, non-affine LayerNorm and a
/// shared learned scale. Parameter names: `slot{k}.w`, `slot{k}.b`, `scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotExpander {
    pub dim: usize,
    pub slots: usize,
    pub params: ParamSet,
}

impl SlotExpander {
    pub fn new(config: &ExpanderConfig, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if config.slots == 0 || config.dim == 0 {
            return Err(Error::Config(
                "expander needs dim > 0 and at least one slot".into(),
            ));
        }
        let d = config.dim;
        let mut params = ParamSet::new();
        let std = config.init_noise / (d as f64).sqrt();
        for k in 0..config.slots {
            let w = Matrix::eye(d) + normal(d, d, std.max(0.0), rng);
            params.insert(format!("slot{k}.w"), w);
            params.insert(format!("slot{k}.b"), Matrix::zeros((1, d)));
        }
        params.insert("scale", Matrix::from_elem((1, 1), scale));
        Ok(Self {
            dim: d,
            slots: config.slots,
            params,
        })
    }

    pub fn scale(&self) -> f64 {
        self.params.get("scale")[[0, 0]]
    }

    pub fn set_scale(&mut self, s: f64) {
        self.params.get_mut("scale")[[0, 0]] = s;
    }

    /// `u` is a `1 × dim` unit row. Returns `K × dim`.
    pub fn forward_graph(&self, g: &mut Graph, w: &Bound, u: Var) -> Var {
        let rows: Vec<Var> = (0..self.slots)
            .map(|k| {
                let y = g.matmul(u, w.get(&format!("slot{k}.w")));
                g.add_row(y, w.get(&format!("slot{k}.b")))
            })
            .collect();
        let stacked = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        };
        let normed = g.layer_norm(stacked, SLOT_LN_EPS);
        g.mul_scalar(normed, w.get("scale"))
    }
}

/// Residual bottleneck `x + W2·GELU(W1 x + b1) + b2`; `W2`, `b2` start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorAdapter {
    pub dim: usize,
    pub bottleneck: usize,
    pub params: ParamSet,
}

impl VectorAdapter {
    pub fn new(dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || bottleneck == 0 {
            return Err(Error::Config("adapter dims must be positive".into()));
        }
        let mut params = ParamSet::new();
        params.insert(
            "w1",
            normal(dim, bottleneck, 1.0 / (dim as f64).sqrt(), rng),
        );
        params.insert("b1", Matrix::zeros((1, bottleneck)));
        params.insert("w2", Matrix::zeros((bottleneck, dim)));
        params.insert("b2", Matrix::zeros((1, dim)));
        Ok(Self {
            dim,
            bottleneck,
            params,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph, w: &Bound, x: Var) -> Var {
        let h = g.matmul(x, w.get("w1"));
        let h = g.add_row(h, w.get("b1"));
        let h = g.gelu(h);
        let o = g.matmul(h, w.get("w2"));
        let o = g.add_row(o, w.get("b2"));
        g.add(x, o)
    }
}

/// Adapter → unit-normalise → expander, inside a graph. `p` is `1 × dim`.
pub fn expand_slots_graph(
    g: &mut Graph,
    expander: &SlotExpander,
    exp_w: &Bound,
    adapter: &VectorAdapter,
    ad_w: &Bound,
    p: Var,
) -> Var {
    let a = adapter.forward_graph(g, ad_w, p);
    let u = g.normalize_rows(a);
    expander.forward_graph(g, exp_w, u)
}

/// `K × dim` slot rows for one projected vector.
pub fn expand_slots(
    expander: &SlotExpander,
    adapter: &VectorAdapter,
    p: &Array1<f64>,
) -> Result<Matrix> {
    if p.len() != expander.dim || adapter.dim != expander.dim {
        return Err(Error::Shape(format!(
            "expander dim {}, adapter dim {}, vector dim {}",
            expander.dim,
            adapter.dim,
            p.len()
        )));
    }
    if !p.iter().all(|v| v.is_finite()) || p.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateVector);
    }
    let mut g = Graph::new();
    let ew = expander.params.bind(&mut g, false);
    let aw = adapter.params.bind(&mut g, false);
    let pv = g.constant(row_matrix(p));
    // The adapter can in principle map a nonzero input to zero.
    let a = adapter.forward_graph(&mut g, &aw, pv);
    if g.value(a).iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateVector);
    }
    let u = g.normalize_rows(a);
    let out = expander.forward_graph(&mut g, &ew, u);
    Ok(g.value(out).clone())
}

/// Positions of `<f0>`…`<f{k-1}>` in `ids`; each must occur exactly once
/// and in order.
pub fn slot_positions(reserved: &ReservedTokens, ids: &[usize], k: usize) -> Result<Vec<usize>> {
    if reserved.slots.len() < k {
        return Err(Error::SlotLayout(format!(
            "decoder reserves {} slots, {k} requested",
            reserved.slots.len()
        )));
    }
    let mut positions = Vec::with_capacity(k);
    for (slot, &id) in reserved.slots[..k].iter().enumerate() {
        let hits: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == id)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [p] => positions.push(*p),
            [] => return Err(Error::SlotLayout(format!("{} missing", slot_token(slot)))),
            _ => return Err(Error::SlotLayout(format!("{} repeated", slot_token(slot)))),
        }
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::SlotLayout("slot tokens out of order".into()));
    }
    if let Some(extra) = reserved.slots[k..].iter().find(|id| ids.contains(id)) {
        return Err(Error::SlotLayout(format!(
            "unexpected extra slot token id {extra}"
        )));
    }
    Ok(positions)
}

/// Base embeddings of `prompt_ids` with the K slot positions overwritten by
/// `slot_rows`.
pub fn inject_slots(
    decoder: &FrozenDecoder,
    prompt_ids: &[usize],
    slot_rows: &Matrix,
) -> Result<Matrix> {
    let k = slot_rows.nrows();
    let positions = slot_positions(decoder.reserved(), prompt_ids, k)?;
    if slot_rows.ncols() != decoder.hidden_dim() {
        return Err(Error::Shape(format!(
            "slot rows have {} columns, decoder dim is {}",
            slot_rows.ncols(),
            decoder.hidden_dim()
        )));
    }
    let mut rows = decoder.embed(prompt_ids)?;
    for (i, &p) in positions.iter().enumerate() {
        rows.row_mut(p).assign(&slot_rows.row(i));
    }
    Ok(rows)
}

/// The zeroed-injection variant: slot positions keep their base rows.
pub fn zeroed_injection(decoder: &FrozenDecoder, prompt_ids: &[usize], k: usize) -> Result<Matrix> {
    slot_positions(decoder.reserved(), prompt_ids, k)?;
    decoder.embed(prompt_ids)
}

/// `"<f0><f1>…<f{k-1}>"`.
pub fn slot_string(k: usize) -> String {
    (0..k).map(slot_token).collect()
}

/// Token ids of the K slots as a tokenizer sees them.
pub fn slot_ids(tok: &dyn Tokenizer, k: usize) -> Result<Vec<usize>> {
    (0..k)
        .map(|i| {
            tok.token_id(&slot_token(i))
                .ok_or_else(|| Error::SlotLayout(format!("tokenizer lacks {}", slot_token(i))))
        })
        .collect()
}
