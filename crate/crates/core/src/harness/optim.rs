//! AdamW with linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(arg_err!("invalid AdamW settings {self:?}"))
        }
    }
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `round(warmup·total)` steps, cosine decay to zero afterwards.
pub fn lr_at(base: f32, warmup: f32, step: u64, total: u64) -> f32 {
    let w = (warmup as f64 * total as f64).round() as u64;
    let base = base as f64;
    let lr = if step < w {
        base * (step + 1) as f64 / w as f64
    } else if total <= w {
        base
    } else {
        let progress = (step - w) as f64 / (total - w) as f64;
        0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    lr as f32
}

/// Decoupled-weight-decay Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Weight decay applies to matrices other than positional and class
    /// embeddings.
    pub fn new(cfg: AdamWConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let decay = params
            .iter()
            .map(|(name, t)| t.ndim() == 2 && name != "pos" && name != "cls")
            .collect();
        Ok(AdamW {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f32) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(dim_err!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            ));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            if grads[i].shape() != p.shape() {
                return Err(dim_err!(
                    "gradient {:?} for parameter {:?}",
                    grads[i].shape(),
                    p.shape()
                ));
            }
            let decay = if self.decay[i] {
                lr * c.weight_decay
            } else {
                0.0
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                *w -= decay * *w;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
