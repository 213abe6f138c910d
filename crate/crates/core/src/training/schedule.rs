//! Training schedule and the transformer-style learning-rate curve.

use crate::error::{Error, Result};

/// Stage boundaries, optimizer constants and warm-up parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingSchedule {
    pub stage1_steps_per_level: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: usize,
    /// Stage-3 learning-rate multiplier ("a lower learning rate").
    pub stage3_lr_scale: f64,
    /// Global scale on the lr curve.
    pub lr_scale: f64,
    /// Model width the curve normalizes by (d_model of the preset).
    pub lr_ref_dim: usize,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    /// Periodic checkpoint interval (steps).
    pub save_every: usize,
    pub seed: u64,
}

impl TrainingSchedule {
    /// Production-scale schedule; CI never runs it.
    pub fn default_preset() -> Self {
        TrainingSchedule {
            stage1_steps_per_level: 60_000,
            stage2_steps: 20_000,
            stage3_steps: 20_000,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 4_000,
            stage3_lr_scale: 0.1,
            lr_scale: 1.0,
            lr_ref_dim: 256,
            grad_clip: 1.0,
            save_every: 1_000,
            seed: 1,
        }
    }

    /// Desk-scale schedule used by the acceptance suite.
    pub fn tiny_preset() -> Self {
        TrainingSchedule {
            stage1_steps_per_level: 200,
            stage2_steps: 200,
            stage3_steps: 200,
            batch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 50,
            stage3_lr_scale: 0.1,
            lr_scale: 0.5,
            lr_ref_dim: 32,
            grad_clip: 1.0,
            save_every: 50,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps_per_level == 0
            || self.stage2_steps == 0
            || self.stage3_steps == 0
            || self.batch_size == 0
            || self.warmup_steps == 0
            || self.save_every == 0
            || self.lr_ref_dim == 0
        {
            return Err(Error::invalid("schedule counts must be at least 1"));
        }
        if !(self.stage3_lr_scale > 0.0 && self.stage3_lr_scale < 1.0) {
            return Err(Error::invalid("need 0 < stage3_lr_scale < 1"));
        }
        if self.lr_scale <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::invalid("lr_scale and grad_clip must be positive"));
        }
        Ok(())
    }
}

/// lr(step) = scale * d^-1/2 * min(step^-1/2, step * warmup^-3/2):
/// a linear ramp to the peak at `warmup_steps`, then inverse-sqrt decay.
pub fn lr_at(step: usize, schedule: &TrainingSchedule) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("lr_at: steps are 1-based"));
    }
    let s = step as f64;
    let w = schedule.warmup_steps as f64;
    let d = schedule.lr_ref_dim as f64;
    Ok(schedule.lr_scale * d.powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_up_then_decay() {
        let sched = TrainingSchedule {
            warmup_steps: 4_000,
            ..TrainingSchedule::default_preset()
        };
        let mut last = 0.0;
        for step in 1..=4_000 {
            let lr = lr_at(step, &sched).unwrap();
            assert!(lr > last, "lr must strictly increase during warm-up");
            last = lr;
        }
        for step in 4_001..4_100 {
            let lr = lr_at(step, &sched).unwrap();
            assert!(lr < last, "lr must strictly decrease after warm-up");
            last = lr;
        }
    }

    #[test]
    fn peak_is_at_warmup() {
        let sched = TrainingSchedule {
            warmup_steps: 50,
            ..TrainingSchedule::tiny_preset()
        };
        let peak = lr_at(50, &sched).unwrap();
        for step in 1..=500 {
            assert!(lr_at(step, &sched).unwrap() <= peak + 1e-18);
        }
    }

    #[test]
    fn linear_ramp_ratio_is_one_half() {
        let sched = TrainingSchedule {
            warmup_steps: 4_000,
            ..TrainingSchedule::default_preset()
        };
        let r = lr_at(2_000, &sched).unwrap() / lr_at(4_000, &sched).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn step_zero_is_rejected() {
        let sched = TrainingSchedule::tiny_preset();
        assert!(lr_at(0, &sched).is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut bad = TrainingSchedule::tiny_preset();
        bad.stage3_lr_scale = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = TrainingSchedule::tiny_preset();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        assert!(TrainingSchedule::tiny_preset().validate().is_ok());
    }
}
