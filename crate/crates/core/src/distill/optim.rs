//! AdamW with decoupled weight decay, global-norm clipping and LR schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    /// Linear warmup, then linear decay to zero at the last step.
    Linear,
    /// Linear warmup, then half-cosine decay to `min_lr`.
    Cosine,
    /// Linear warmup, then `peak · γ^(s - W)` floored at `min_lr`.
    Exponential,
}

/// Optimizer and learning-rate settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub schedule: ScheduleKind,
    /// Warmup length as a fraction of the total steps.
    pub warmup_frac: f64,
    /// Absolute warmup length; overrides `warmup_frac` when set.
    pub warmup_steps: Option<usize>,
    pub min_lr: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            schedule: ScheduleKind::Constant,
            warmup_frac: 0.0,
            warmup_steps: None,
            min_lr: 0.0,
            gamma: 0.999,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("optimizer: {what}")));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_lr >= 0.0) {
            return bad("eps > 0, weight_decay >= 0 and min_lr >= 0 required");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_frac * total_steps as f64).ceil() as usize);
        Schedule {
            kind: self.schedule,
            peak: self.lr,
            warmup,
            total: total_steps,
            min_lr: self.min_lr,
            gamma: self.gamma,
        }
    }
}

/// Learning rate as a function of the number of completed optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_lr: f64,
    pub gamma: f64,
}

impl Schedule {
    /// LR for the optimizer step taken after `s` completed steps.
    pub fn lr(&self, s: usize) -> f64 {
        if s < self.warmup {
            return self.peak * s as f64 / self.warmup as f64;
        }
        let after = (s - self.warmup) as f64;
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        match self.kind {
            ScheduleKind::Constant => self.peak,
            ScheduleKind::Linear => self.peak * ((span - after) / span).max(0.0),
            ScheduleKind::Cosine => {
                let progress = (after / span).min(1.0);
                self.min_lr + (self.peak - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
            }
            ScheduleKind::Exponential => (self.peak * self.gamma.powf(after)).max(self.min_lr),
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with decoupled weight decay.
///
/// Per step `t`: `p ← p(1 - lr·wd)`, then the bias-corrected Adam update
/// `p ← p - lr · m̂ / (√v̂ + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimConfig,
    pub t: u64,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                _ => return Err(Error::shape("adamw", format!("gradient {name} has no matching parameter"))),
            }
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let decay = 1.0 - lr * c.weight_decay;
            let (pd, md, vd) = (p.data_mut(), st.m.data_mut(), st.v.data_mut());
            for (((pi, mi), vi), &gi) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *pi *= decay;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
