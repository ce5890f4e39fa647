use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tensor::ParameterStore;
use crate::{Error, Result};

/// Adam moments and step count, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimState,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimState::default(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected update of every parameter in `params`.
    ///
    /// Every parameter must have a gradient of matching length.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            match grads.get(name) {
                None => return Err(Error::MissingGradient(name.clone())),
                Some(g) if g.len() != p.numel() => {
                    return Err(Error::shape("adam", &p.shape, &[g.len()]));
                }
                _ => {}
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` to `eta_min` over `t_max` steps, then
/// held at `eta_min`.
pub fn cosine_lr(step: u64, t_max: u64, base_lr: f64, eta_min: f64) -> f64 {
    if t_max == 0 || step >= t_max {
        return eta_min;
    }
    let frac = step as f64 / t_max as f64;
    eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (PI * frac).cos())
}

/// Decay actually used at update `step` (0-based): the configured decay,
/// capped early on so the average does not stay pinned to the initial
/// weights.
pub fn ema_decay(decay: f64, step: u64) -> f64 {
    let warm = (1.0 + step as f64) / (10.0 + step as f64);
    decay.min(warm)
}

/// `shadow <- decay * shadow + (1 - decay) * params` for every parameter.
pub fn ema_update(shadow: &mut ParameterStore, params: &ParameterStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    for (name, s) in shadow.iter_mut() {
        let p = params.require(name)?;
        if p.shape != s.shape {
            return Err(Error::shape("ema", &s.shape, &p.shape));
        }
        for (sv, pv) in s.data.iter_mut().zip(&p.data) {
            *sv = decay * *sv + (1.0 - decay) * pv;
        }
    }
    Ok(())
}

/// Stops after `patience` consecutive epochs without an improvement larger
/// than `min_delta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records a validation loss; returns true when this epoch is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}
