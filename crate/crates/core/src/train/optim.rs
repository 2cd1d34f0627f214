//! AdamW, the warm-restart cosine schedule and global-norm clipping.

use crate::models::ParameterSet;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainError};

/// Per-parameter first/second moments and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl AdamW {
    pub fn new(params: &ParameterSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn from_config(params: &ParameterSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// One update: decoupled decay `θ ← θ(1 − lr·wd)`, then the
    /// bias-corrected Adam step `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<(), TrainError> {
        if !(lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be > 0, got {lr}")));
        }
        for (name, g) in grads.iter() {
            if g.data().iter().any(|x| x.is_nan()) {
                return Err(TrainError::NanGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (name, theta) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| TrainError::Config(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name).expect("moments mirror parameters");
            let v = self.v.get_mut(name).expect("moments mirror parameters");
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((th, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *th *= decay;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let denom = (*vi / bc2).sqrt() + eps;
                if denom > 0.0 {
                    *th -= lr * (*mi / bc1) / denom;
                }
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts. Cycle `i` lasts `T₀·multⁱ`
/// epochs; within it `lr = min + ½(base − min)(1 + cos(π·t_cur/T_i))`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut t_cur = epoch;
    let mut period = cfg.restart_period.max(1);
    while t_cur >= period {
        t_cur -= period;
        period = period.saturating_mul(cfg.restart_mult.max(1));
    }
    let phase = std::f64::consts::PI * t_cur as f64 / period as f64;
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + phase.cos())
}

pub fn global_norm(grads: &ParameterSet) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm observed before clipping.
pub fn clip_gradients(grads: &mut ParameterSet, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
