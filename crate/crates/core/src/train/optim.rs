use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm limit; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn momentum() -> f64 {
    0.9
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            momentum: momentum(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::SgdMomentum,
            momentum,
            ..Self::adam(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight decay must be >= 0 and eps > 0".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Moment buffers, one per parameter, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub step: u64,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new<T: Real>(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let second = if config.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Ok(Optimizer {
            config,
            step: 0,
            first: zeros,
            second,
        })
    }

    /// Applies one update at learning rate `lr` using the gradients in `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for (_, p) in store.iter() {
            for g in p.grad.data() {
                let g = g.to_f64_lossy();
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
                }
                sq += g * g;
            }
        }
        let scale = match self.config.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            match c.kind {
                OptimizerKind::Adam => {
                    let v = &mut self.second[i];
                    for j in 0..value.len() {
                        let w = value[j].to_f64_lossy();
                        let g = grad[j].to_f64_lossy() * scale + c.weight_decay * w;
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                        value[j] = T::from_f64_lossy(w - update);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    for j in 0..value.len() {
                        let w = value[j].to_f64_lossy();
                        let g = grad[j].to_f64_lossy() * scale + c.weight_decay * w;
                        m[j] = c.momentum * m[j] + g;
                        value[j] = T::from_f64_lossy(w - lr * m[j]);
                    }
                }
            }
        }
        Ok(())
    }
}
