use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annealing {
    Cosine,
    Constant,
}

/// Peak rate `base_lr * batch_size / reference_batch_size * stage_lr_scale`,
/// reached after a linear per-step warmup and then annealed per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub reference_batch_size: usize,
    pub warmup_epochs: [usize; 3],
    pub annealing: Annealing,
    pub stage_lr_scale: [f64; 3],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.03,
            reference_batch_size: 256,
            warmup_epochs: [10, 0, 0],
            annealing: Annealing::Cosine,
            stage_lr_scale: [1.0, 1.0, 1.0],
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.reference_batch_size == 0 {
            return Err(Error::Config("base_lr and reference_batch_size must be positive".into()));
        }
        if self.stage_lr_scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("stage_lr_scale entries must be non-negative".into()));
        }
        Ok(())
    }

    pub fn peak_lr(&self, stage_index: usize, batch_size: usize) -> f64 {
        self.base_lr * batch_size as f64 / self.reference_batch_size as f64 * self.stage_lr_scale[stage_index]
    }

    /// Rate for optimisation step `step` (0-based) of a stage lasting
    /// `total_steps` steps.
    pub fn learning_rate(
        &self,
        stage_index: usize,
        step: usize,
        total_steps: usize,
        steps_per_epoch: usize,
        batch_size: usize,
    ) -> f64 {
        let peak = self.peak_lr(stage_index, batch_size);
        let warmup = (self.warmup_epochs[stage_index] * steps_per_epoch).min(total_steps);
        if step < warmup {
            return peak * (step + 1) as f64 / warmup as f64;
        }
        match self.annealing {
            Annealing::Constant => peak,
            Annealing::Cosine => {
                let span = (total_steps - warmup).max(1) as f64;
                let t = (step - warmup) as f64 / span;
                0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = ScheduleConfig::default();
        let peak = s.peak_lr(0, 512);
        assert!((peak - 0.06).abs() < 1e-15);
        // 10 warmup epochs of 2 steps, 100 steps in total
        assert!((s.learning_rate(0, 0, 100, 2, 512) - peak / 20.0).abs() < 1e-15);
        assert!((s.learning_rate(0, 19, 100, 2, 512) - peak).abs() < 1e-15);
        assert!((s.learning_rate(0, 20, 100, 2, 512) - peak).abs() < 1e-15);
        assert!((s.learning_rate(0, 60, 100, 2, 512) - peak / 2.0).abs() < 1e-12);
        assert!(s.learning_rate(0, 99, 100, 2, 512) < peak * 1e-3);
        // later stages start at their peak
        assert!((s.learning_rate(2, 0, 100, 2, 512) - peak).abs() < 1e-15);
    }
}
