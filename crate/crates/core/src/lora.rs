//! Low-rank adapters on the frozen decoder's projections.
//!
//! For a base weight applied as `x·W` (`in × out`), the adapted output is
//! `x·W + (alpha/r)·(x·Aᵀ)·Bᵀ` with `A: r × in` and `B: out × r`, i.e. the
//! effective weight is `W + (alpha/r)·(B·A)ᵀ`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::models::transformer::{layer_key, StackConfig, PROJECTIONS};
use crate::models::LowRank;
use crate::tensor::{Bound, Graph, Matrix, ParamSet, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Layer-local projection names (`wq`, `wk`, `wv`, `wo`, `up`, `down`).
    pub targets: Vec<String>,
    /// Layers to adapt; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            targets: PROJECTIONS.iter().map(|s| s.to_string()).collect(),
            layers: None,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `A` and `B` per adapted projection, keyed `layer{l}.{name}.a` / `.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapterSet {
    pub config: LoraConfig,
    pub params: ParamSet,
}

impl LoraAdapterSet {
    /// `A ~ N(0, 1/in)`, `B = 0`.
    pub fn new(config: LoraConfig, stack: &StackConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if let Some(bad) = config
            .targets
            .iter()
            .find(|t| !PROJECTIONS.contains(&t.as_str()))
        {
            return Err(Error::Config(format!("unknown LoRA target `{bad}`")));
        }
        let layers: Vec<usize> = match &config.layers {
            Some(l) => l.clone(),
            None => (0..stack.layers).collect(),
        };
        if let Some(bad) = layers.iter().find(|&&l| l >= stack.layers) {
            return Err(Error::Config(format!(
                "LoRA layer {bad} outside the decoder"
            )));
        }
        let mut params = ParamSet::new();
        for &l in &layers {
            for name in &config.targets {
                let (inp, out) = stack.projection_shape(name);
                let dist = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("finite std");
                let a = Matrix::from_shape_fn((config.rank, inp), |_| dist.sample(rng));
                params.insert(format!("{}.a", layer_key(l, name)), a);
                params.insert(
                    format!("{}.b", layer_key(l, name)),
                    Matrix::zeros((out, config.rank)),
                );
            }
        }
        Ok(Self { config, params })
    }

    pub fn zero_b(&mut self) {
        for (name, m) in self.params.iter_mut() {
            if name.ends_with(".b") {
                m.fill(0.0);
            }
        }
    }

    /// Effective `in × out` weight for a layer-local projection.
    pub fn effective_weight(&self, base: &Matrix, layer: usize, name: &str) -> Matrix {
        let key = layer_key(layer, name);
        match (
            self.params.try_get(&format!("{key}.a")),
            self.params.try_get(&format!("{key}.b")),
        ) {
            (Some(a), Some(b)) => base + &(b.dot(a).t().to_owned() * self.config.scaling()),
            _ => base.clone(),
        }
    }
}

/// Graph handles of a bound adapter set; plugs into the decoder forward.
pub struct BoundLora {
    map: BTreeMap<(usize, String), (Var, Var)>,
    scaling: f64,
}

impl BoundLora {
    pub fn new(bound: &Bound, scaling: f64) -> Self {
        let mut map = BTreeMap::new();
        for (name, a) in bound.vars() {
            let Some(stem) = name.strip_suffix(".a") else {
                continue;
            };
            let Some((layer, proj)) = stem.strip_prefix("layer").and_then(|r| r.split_once('.'))
            else {
                continue;
            };
            let Ok(layer) = layer.parse::<usize>() else {
                continue;
            };
            let b = bound.get(&format!("{stem}.b"));
            map.insert((layer, proj.to_string()), (a, b));
        }
        Self { map, scaling }
    }

    pub fn bind(set: &LoraAdapterSet, g: &mut Graph, trainable: bool) -> (Bound, Self) {
        let bound = set.params.bind(g, trainable);
        let me = Self::new(&bound, set.config.scaling());
        (bound, me)
    }
}

impl LowRank for BoundLora {
    fn delta(&self, layer: usize, name: &str) -> Option<(Var, Var, f64)> {
        self.map
            .get(&(layer, name.to_string()))
            .map(|(a, b)| (*a, *b, self.scaling))
    }
}
