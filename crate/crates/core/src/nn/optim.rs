//! Learning-rate schedules and momentum SGD.

use serde::{Deserialize, Serialize};

use super::params::{ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// Half-cosine from the base rate to zero over the post-warmup epochs.
    Cosine,
    /// Multiply by `factor` every `period` epochs.
    Step { period: usize, factor: f64 },
    Constant,
}

impl Schedule {
    /// Divide by 10 every 30 epochs.
    pub const STEP_30: Schedule = Schedule::Step {
        period: 30,
        factor: 0.1,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Overrides the `0.1·batch/256` rule.
    pub base_lr: Option<f64>,
    pub warmup_epochs: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            base_lr: None,
            warmup_epochs: 5.0,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 90,
            seed: 0,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.warmup_epochs >= 0.0) || self.base_lr.is_some_and(|lr| !(lr >= 0.0)) {
            return Err(Error::Config("learning rate and warmup must be non-negative".into()));
        }
        if let Schedule::Step { period: 0, .. } = self.schedule {
            return Err(Error::Config("step schedule period must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.1 * self.batch_size as f64 / 256.0)
    }

    /// Rate after `progress` epochs (fractional). Warmup ramps linearly from
    /// zero; the schedule takes over once it is complete.
    pub fn lr_at(&self, progress: f64) -> f64 {
        let base = self.base_lr();
        if progress < self.warmup_epochs {
            return base * progress / self.warmup_epochs;
        }
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Step { period, factor } => base * factor.powi((progress / period as f64).floor() as i32),
            Schedule::Cosine => {
                let span = self.epochs as f64 - self.warmup_epochs;
                if span <= 0.0 {
                    return base;
                }
                let t = ((progress - self.warmup_epochs) / span).clamp(0.0, 1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// `v ← μv + g + λw` (no decay on mixture weights), `w ← w − lr·v`, then
/// mixture weights are clamped to `[0, 1]`.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (_, p) in store.iter_mut() {
        let decay = match p.role {
            ParamRole::Buffer => continue,
            ParamRole::Alpha => T::zero(),
            ParamRole::Weight => wd,
        };
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(p.velocity.iter_mut()).zip(&p.grad) {
            *v = mu * *v + g + decay * *w;
            *w -= lr * *v;
        }
        if p.role == ParamRole::Alpha {
            p.value.data_mut().iter_mut().for_each(|a| *a = a.max(T::zero()).min(T::one()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;

    #[test]
    fn lr_rule_and_schedules() {
        let cfg = TrainConfig::default();
        assert!((cfg.base_lr() - 0.1).abs() < 1e-15);
        let step = TrainConfig {
            schedule: Schedule::STEP_30,
            ..cfg.clone()
        };
        assert!((step.lr_at(35.0) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(2.0) - 0.1 * 2.0 / 5.0).abs() < 1e-15);
        assert_eq!(cfg.lr_at(0.0), 0.0);
        assert!((cfg.lr_at(5.0) - 0.1).abs() < 1e-15);
        assert!(cfg.lr_at(90.0).abs() < 1e-15);
        let batch_64 = TrainConfig {
            batch_size: 64,
            ..cfg
        };
        assert!((batch_64.base_lr() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn lr_is_never_negative() {
        let cfg = TrainConfig {
            epochs: 7,
            warmup_epochs: 2.0,
            ..TrainConfig::default()
        };
        for k in 0..200 {
            assert!(cfg.lr_at(k as f64 * 0.05) >= 0.0);
        }
    }

    #[test]
    fn alpha_is_projected_and_not_decayed() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", DenseTensor::scalar(0.9), ParamRole::Alpha).unwrap();
        let w = store.add("w", DenseTensor::scalar(1.0), ParamRole::Weight).unwrap();
        let b = store.add("b", DenseTensor::scalar(3.0), ParamRole::Buffer).unwrap();
        store.get_mut(a).grad[0] = -10.0;
        sgd_step(&mut store, 0.1, 0.9, 0.5);
        assert_eq!(store.value(a).data()[0], 1.0);
        assert!((store.value(w).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(store.value(b).data()[0], 3.0);
        // zero gradient, no decay: alpha does not move
        store.zero_grad();
        store.reset_momentum();
        store.get_mut(a).value.data_mut()[0] = 0.3;
        sgd_step(&mut store, 0.1, 0.9, 0.5);
        assert_eq!(store.value(a).data()[0], 0.3);
    }
}
