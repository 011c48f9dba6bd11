use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Params64, Tensor64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball SGD.
    #[default]
    Sgd,
    AdamW,
}

keyword_enum!(OptimizerKind, "optimizer", "sgd" => OptimizerKind::Sgd, "adamw" => OptimizerKind::AdamW);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero over the stage.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            schedule: LrSchedule::Cosine,
            warmup_steps: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("momentum and betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::config("weight_decay >= 0, eps > 0 and clip_norm > 0 are required"));
        }
        Ok(())
    }

    /// Step size at `step` of a stage lasting `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        };
        self.lr * warm * decay
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor64>,
    second: Vec<Tensor64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &Params64) -> Result<Self> {
        cfg.validate()?;
        let zeros = |p: &Params64| p.tensors.iter().map(|(_, t)| Tensor64::zeros(t.shape())).collect();
        Ok(Self {
            cfg,
            first: zeros(params),
            second: zeros(params),
            steps: 0,
        })
    }

    /// Applies one update with step size `lr`. Returns the gradient norm
    /// before clipping.
    pub fn step(&mut self, params: &mut Params64, grads: &[Tensor64], lr: f64) -> Result<f64> {
        if grads.len() != params.tensors.len() {
            return Err(Error::Internal("gradient count differs from parameter count".into()));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.cfg;
        for (i, ((_, p), g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = p.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        let gj = g.data()[j] * clip + c.weight_decay * p[j];
                        m[j] = c.momentum * m[j] + gj;
                        p[j] -= lr * m[j];
                    }
                }
                OptimizerKind::AdamW => {
                    let b1 = 1.0 - c.beta1.powi(self.steps as i32);
                    let b2 = 1.0 - c.beta2.powi(self.steps as i32);
                    for j in 0..p.len() {
                        let gj = g.data()[j] * clip;
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                        let upd = (m[j] / b1) / ((v[j] / b2).sqrt() + c.eps);
                        p[j] -= lr * (upd + c.weight_decay * p[j]);
                    }
                }
            }
        }
        Ok(norm)
    }
}
