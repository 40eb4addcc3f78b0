//! AdamW with decoupled weight decay and the learning-rate schedules.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{OptimState, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push((k, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            out.push(("eps", format!("must be > 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        out
    }

    /// Updates one tensor in place. `t` is the 1-based step count.
    pub fn update(&self, param: &mut Array2<f64>, grad: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, t: u64, lr: f64) -> Result<()> {
        if param.dim() != grad.dim() || m.dim() != grad.dim() || v.dim() != grad.dim() {
            return Err(Error::Shape(format!(
                "param {:?}, grad {:?}, moments {:?}/{:?}",
                param.dim(),
                grad.dim(),
                m.dim(),
                v.dim()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        ndarray::Zip::from(param)
            .and(grad)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * (mh / (vh.sqrt() + self.eps)) + lr * self.weight_decay * *p;
            });
        Ok(())
    }

    /// One step over every parameter at learning rate `lr`.
    pub fn step(&self, store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
        self.step_scaled(store, state, lr, |_| Some(1.0))
    }

    /// One step with a per-parameter learning-rate multiplier; `None`
    /// leaves that parameter (and its moments) untouched.
    pub fn step_scaled(
        &self,
        store: &mut ParamStore,
        state: &mut OptimState,
        lr: f64,
        scale: impl Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        state.step += 1;
        for (name, p) in store.iter_mut() {
            let Some(s) = scale(name) else { continue };
            let m = state
                .first
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.value.dim()));
            let v = state
                .second
                .entry(name.to_string())
                .or_insert_with(|| Array2::zeros(p.value.dim()));
            self.update(&mut p.value, &p.grad, m, v, state.step, lr * s)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_final`.
pub fn cosine_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_peak: f64, lr_final: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond {total_steps}")));
    }
    if warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "warmup {warmup_steps} must be shorter than {total_steps} steps"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_peak * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_final + 0.5 * (lr_peak - lr_final) * (1.0 + (PI * progress).cos()))
}

/// `base` divided by 10 at each of the given fractions of training.
pub fn step_decay(step: usize, total_steps: usize, base: f64, milestones: &[f64]) -> f64 {
    let progress = step as f64 / total_steps.max(1) as f64;
    let drops = milestones.iter().filter(|&&m| progress >= m).count();
    base * 0.1f64.powi(drops as i32)
}
