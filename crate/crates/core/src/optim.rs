//! AdamW with linear warmup.

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping the learning rate up from zero.
    pub warmup_frac: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub total_steps: usize,
    pub step: usize,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamW {
    pub fn new(config: AdamWConfig, total_steps: usize, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut z = ParamSet::new();
            for (k, m) in p.iter() {
                z.insert(k, Matrix::zeros(m.dim()));
            }
            z
        };
        Self {
            config,
            total_steps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = (self.config.warmup_frac * self.total_steps as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.config.learning_rate
        } else {
            self.config.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }

    /// One update. Decay skips vectors and scalars (biases, gains, scale).
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        let c = self.config.clone();
        let lr = self.learning_rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.try_get(name) else {
                continue;
            };
            let m = self.m.get_mut(name);
            m.zip_mut_with(g, |mv, &gv| *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv);
            let v = self.v.get_mut(name);
            v.zip_mut_with(g, |vv, &gv| *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv);
            let decay = if p.nrows() > 1 && p.ncols() > 1 {
                c.weight_decay
            } else {
                0.0
            };
            let m = self.m.get(name);
            let v = self.v.get(name);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .for_each(|pv, &mv, &vv| {
                    let update = (mv / bc1) / ((vv / bc2).sqrt() + c.eps);
                    *pv -= lr * (update + decay * *pv);
                });
        }
    }
}
