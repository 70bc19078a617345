//! Pre-norm transformer stack shared by the toy encoder and decoder.
//!
//! Blocks are `x + Attn(RMSNorm(x))` then `x + MLP(RMSNorm(x))`, with
//! bias-free RMSNorm, rotary positions and bias-free projections, so an
//! all-zero input row stays zero until attention mixes context into it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Bound, Graph, Matrix, ParamSet, Var};

pub const RMS_EPS: f64 = 1e-6;

/// Projections that may carry a low-rank delta.
pub const PROJECTIONS: [&str; 6] = ["wq", "wk", "wv", "wo", "up", "down"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub causal: bool,
    /// Decoders carry an output head; encoders do not.
    pub lm_head: bool,
}

impl StackConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `(rows, cols)` of a projection weight in layer-local naming.
    pub fn projection_shape(&self, name: &str) -> (usize, usize) {
        match name {
            "up" => (self.dim, self.mlp_hidden),
            "down" => (self.mlp_hidden, self.dim),
            _ => (self.dim, self.dim),
        }
    }
}

pub fn layer_key(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

/// Random initialisation; embedding rows listed in `zero_rows` start at zero.
pub fn init_weights(cfg: &StackConfig, zero_rows: &[usize], rng: &mut impl Rng) -> ParamSet {
    let mut normal = |rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("finite std");
        Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
    };
    let mut p = ParamSet::new();
    let mut embed = normal(cfg.vocab_size, cfg.dim, 1.0);
    for &r in zero_rows {
        embed.row_mut(r).fill(0.0);
    }
    p.insert("embed", embed);
    let d = cfg.dim as f64;
    let h = cfg.mlp_hidden as f64;
    for l in 0..cfg.layers {
        p.insert(layer_key(l, "attn_norm"), Matrix::ones((1, cfg.dim)));
        p.insert(layer_key(l, "mlp_norm"), Matrix::ones((1, cfg.dim)));
        for name in PROJECTIONS {
            let (r, c) = cfg.projection_shape(name);
            let fan_in = if name == "down" { h } else { d };
            p.insert(layer_key(l, name), normal(r, c, 1.0 / fan_in.sqrt()));
        }
    }
    p.insert("final_norm", Matrix::ones((1, cfg.dim)));
    if cfg.lm_head {
        p.insert("lm_head", normal(cfg.dim, cfg.vocab_size, 1.0 / d.sqrt()));
    }
    p
}

/// Bound low-rank deltas: `(A, B, alpha / r)` per layer-local projection key.
pub trait LowRank {
    fn delta(&self, layer: usize, name: &str) -> Option<(Var, Var, f64)>;
}

pub struct NoDelta;

impl LowRank for NoDelta {
    fn delta(&self, _: usize, _: &str) -> Option<(Var, Var, f64)> {
        None
    }
}

/// Graph outputs of one forward pass.
pub struct StackOutput {
    /// Residual stream after each block.
    pub layers: Vec<Var>,
    /// Final residual stream before the closing RMSNorm.
    pub pre_norm: Var,
    /// Final hidden states after the closing RMSNorm.
    pub hidden: Var,
}

fn projection(g: &mut Graph, x: Var, w: Var, delta: Option<(Var, Var, f64)>) -> Var {
    let y = g.matmul(x, w);
    match delta {
        Some((a, b, scaling)) => {
            let down = g.matmul_t(x, a);
            let up = g.matmul_t(down, b);
            let up = g.scale(up, scaling);
            g.add(y, up)
        }
        None => y,
    }
}

fn rms_norm_gain(g: &mut Graph, x: Var, gain: Var) -> Var {
    let n = g.rms_norm(x, RMS_EPS);
    g.mul_row(n, gain)
}

/// Runs the stack over input rows `input` (`seq × dim`). `key_mask` marks
/// positions that may be attended to (padding excluded).
pub fn forward(
    cfg: &StackConfig,
    g: &mut Graph,
    w: &Bound,
    delta: &dyn LowRank,
    input: Var,
    key_mask: Option<&[bool]>,
) -> StackOutput {
    let (seq, _) = g.shape(input);
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mask_bias = key_mask.map(|m| {
        let row = Matrix::from_shape_fn((seq, seq), |(_, c)| if m[c] { 0.0 } else { -1e9 });
        g.constant(row)
    });
    let mut x = input;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let k = |n: &str| layer_key(l, n);
        let h = rms_norm_gain(g, x, w.get(&k("attn_norm")));
        let q = projection(g, h, w.get(&k("wq")), delta.delta(l, "wq"));
        let kk = projection(g, h, w.get(&k("wk")), delta.delta(l, "wk"));
        let v = projection(g, h, w.get(&k("wv")), delta.delta(l, "wv"));
        let q = g.rope(q, hd);
        let kk = g.rope(kk, hd);
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = g.slice_cols(q, head * hd, hd);
            let kh = g.slice_cols(kk, head * hd, hd);
            let vh = g.slice_cols(v, head * hd, hd);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, inv_sqrt);
            if let Some(bias) = mask_bias {
                scores = g.add(scores, bias);
            }
            let attn = g.softmax(scores, cfg.causal);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let o = projection(g, cat, w.get(&k("wo")), delta.delta(l, "wo"));
        x = g.add(x, o);
        let h = rms_norm_gain(g, x, w.get(&k("mlp_norm")));
        let up = projection(g, h, w.get(&k("up")), delta.delta(l, "up"));
        let act = g.gelu(up);
        let down = projection(g, act, w.get(&k("down")), delta.delta(l, "down"));
        x = g.add(x, down);
        layers.push(x);
    }
    let hidden = rms_norm_gain(g, x, w.get("final_norm"));
    StackOutput {
        layers,
        pre_norm: x,
        hidden,
    }
}
