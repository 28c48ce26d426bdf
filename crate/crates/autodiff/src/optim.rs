//! Gradient-descent updates over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{AdError, Result};
use crate::params::ParamSet;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `θ ← θ − μ(∇θ + 2λθ)`, optionally with heavy-ball momentum.
    Sgd { momentum: f64 },
    /// Per-parameter second-moment scaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// `λ` of a `λ‖Θ‖²` penalty, realized as weight decay `2λθ`.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Per-epoch multiplier of the base learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from 1 at the first epoch down to `floor` at the last.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                if epochs <= 1 {
                    return 1.0;
                }
                let u = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for id in params.ids() {
            if params.grad(id).iter().any(|g| !g.is_finite()) {
                let name = params.name(id).to_string();
                params.zero_grad();
                return Err(AdError::NonFiniteGradient(name));
            }
        }
        self.steps += 1;
        let lr = T::lit(self.cfg.lr);
        let decay = T::lit(2.0 * self.cfg.weight_decay);
        let kind = self.cfg.kind;
        let frozen = params.is_frozen();
        if self.first.is_empty() {
            for (_, v, _, _) in params.entries_mut() {
                self.first.push(vec![T::zero(); v.len()]);
                self.second.push(vec![T::zero(); v.len()]);
            }
        }
        let t = self.steps as i32;
        for (i, (_, value, grad, trainable)) in params.entries_mut().enumerate() {
            if !trainable || frozen {
                continue;
            }
            let m = &mut self.first[i];
            let s = &mut self.second[i];
            for (j, (theta, g)) in value.data_mut().iter_mut().zip(grad.iter()).enumerate() {
                let g = *g + decay * *theta;
                match kind {
                    OptimizerKind::Sgd { momentum } if momentum == 0.0 => *theta -= lr * g,
                    OptimizerKind::Sgd { momentum } => {
                        m[j] = T::lit(momentum) * m[j] + g;
                        *theta -= lr * m[j];
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        s[j] = b2 * s[j] + (T::one() - b2) * g * g;
                        let mh = m[j] / (T::one() - b1.powi(t));
                        let sh = s[j] / (T::one() - b2.powi(t));
                        *theta -= lr * mh / (sh.sqrt() + T::lit(eps));
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Rescale the gradients of all `sets` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(sets: &mut [&mut ParamSet<T>], max_norm: T) -> T {
    let norm = sets.iter().map(|s| s.grad_sq_norm()).sum::<T>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for set in sets.iter_mut() {
            set.scale_grads(s);
        }
    }
    norm
}
