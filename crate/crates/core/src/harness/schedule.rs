//! Learning-rate schedules as pure functions of `(step, total)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Optional warmup, constant until `stable_ratio · total`, then linear to 0.
    ConstantThenLinear,
    /// Linear warmup, then half a cosine down to 0.
    CosineWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    pub warmup_ratio: f64,
    /// End of the constant phase as a fraction of all steps.
    pub stable_ratio: f64,
}

impl SchedulerSpec {
    pub fn constant_then_linear() -> Self {
        Self {
            kind: SchedulerKind::ConstantThenLinear,
            warmup_ratio: 0.0,
            stable_ratio: 0.4,
        }
    }

    pub fn cosine_warmup() -> Self {
        Self {
            kind: SchedulerKind::CosineWarmup,
            warmup_ratio: 0.1,
            stable_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio must lie in [0, 1)"));
        }
        if self.kind == SchedulerKind::ConstantThenLinear {
            if !(0.0..=1.0).contains(&self.stable_ratio) {
                return Err(Error::config("stable_ratio must lie in [0, 1]"));
            }
            if self.warmup_ratio > self.stable_ratio {
                return Err(Error::config("warmup_ratio must not exceed stable_ratio"));
            }
        }
        Ok(())
    }
}

/// Learning rate for `step ∈ [0, total]`.
pub fn lr_at(spec: &SchedulerSpec, base_lr: f64, step: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::Range {
            what: "scheduler step",
            detail: format!("{step} > total {total}"),
        });
    }
    let (s, t) = (step as f64, total as f64);
    let warmup_end = spec.warmup_ratio * t;
    if s < warmup_end {
        return Ok(base_lr * s / warmup_end);
    }
    let lr = match spec.kind {
        SchedulerKind::ConstantThenLinear => {
            let stable_end = spec.stable_ratio * t;
            if s < stable_end {
                base_lr
            } else {
                base_lr * (t - s) / (t - stable_end)
            }
        }
        SchedulerKind::CosineWarmup => {
            let progress = (s - warmup_end) / (t - warmup_end);
            0.5 * base_lr * (1.0 + (PI * progress).cos())
        }
    };
    Ok(lr)
}
