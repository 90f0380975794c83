use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from `floor·peak` to `peak`, a hold, then linear decay back
/// to `floor·peak` over the final `decay_steps` of `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriStageSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub total_steps: usize,
    /// Fraction of `peak_lr` at both ends.
    pub floor: f64,
}

impl TriStageSchedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, decay_steps: usize, total_steps: usize) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_steps,
            decay_steps,
            total_steps,
            floor: 0.01,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps + self.decay_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} + decay {} exceeds {} total steps",
                self.warmup_steps, self.decay_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::Config("tri-stage needs a positive peak and a floor in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let low = self.floor * self.peak_lr;
        let decay_start = self.total_steps - self.decay_steps;
        if step < self.warmup_steps {
            low + (self.peak_lr - low) * step as f64 / self.warmup_steps as f64
        } else if step < decay_start {
            self.peak_lr
        } else if step < self.total_steps {
            self.peak_lr - (self.peak_lr - low) * (step - decay_start) as f64 / self.decay_steps as f64
        } else {
            low
        }
    }
}

/// Linear warmup from zero to `base_lr`, then a half-cosine down to `min_lr`
/// over `period_steps`, flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub period_steps: usize,
}

impl CosineSchedule {
    /// 1e-4 decaying to 1e-5 over 5000 steps, no warmup.
    pub fn vision_default() -> Self {
        Self {
            base_lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 0,
            period_steps: 5000,
        }
    }

    /// Same shape with both endpoints multiplied by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            base_lr: self.base_lr * factor,
            min_lr: self.min_lr * factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.base_lr || self.period_steps == 0 {
            return Err(Error::Config("cosine needs 0 <= min_lr <= base_lr and a positive period".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress = ((step - self.warmup_steps) as f64 / self.period_steps as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    TriStage(TriStageSchedule),
    Cosine(CosineSchedule),
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::TriStage(s) => s.lr_at(step),
            LrSchedule::Cosine(s) => s.lr_at(step),
            LrSchedule::Constant { lr } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::TriStage(s) => s.validate(),
            LrSchedule::Cosine(s) => s.validate(),
            LrSchedule::Constant { lr } if *lr > 0.0 => Ok(()),
            LrSchedule::Constant { lr } => Err(Error::Config(format!("constant lr {lr} must be positive"))),
        }
    }
}

impl From<CosineSchedule> for LrSchedule {
    fn from(s: CosineSchedule) -> Self {
        LrSchedule::Cosine(s)
    }
}

impl From<TriStageSchedule> for LrSchedule {
    fn from(s: TriStageSchedule) -> Self {
        LrSchedule::TriStage(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn vision_cosine_endpoints() {
        let s = CosineSchedule::vision_default();
        assert!(rel(s.lr_at(0), 1e-4) < 1e-12);
        assert!(rel(s.lr_at(2500), 5.5e-5) < 1e-12);
        assert!(rel(s.lr_at(5000), 1e-5) < 1e-12);
        assert_eq!(s.lr_at(9000), s.lr_at(5000));
        // 300 steps never get near the minimum
        assert!(s.lr_at(300) > 9.5e-5);
    }

    #[test]
    fn cosine_warmup_reaches_base() {
        let s = CosineSchedule {
            base_lr: 5e-5,
            min_lr: 0.0,
            warmup_steps: 500,
            period_steps: 29_500,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(500), 5e-5);
        assert!(s.lr_at(30_000).abs() < 1e-20);
    }

    #[test]
    fn tri_stage_shape() {
        let s = TriStageSchedule::new(1e-3, 10_000, 20_000, 40_000).unwrap();
        assert!(rel(s.lr_at(0), 1e-5) < 1e-12);
        assert_eq!(s.lr_at(10_000), 1e-3);
        assert_eq!(s.lr_at(19_999), 1e-3);
        assert!(rel(s.lr_at(40_000), 1e-5) < 1e-12);
        assert!(rel(s.lr_at(30_000), (1e-3 + 1e-5) / 2.0) < 1e-12);
        assert!(TriStageSchedule::new(1e-3, 10_000, 20_000, 25_000).is_err());
    }

    proptest! {
        #[test]
        fn tri_stage_continuous_and_monotone_after_warmup(
            warm in 1usize..200, hold in 0usize..200, decay in 1usize..200, peak in 1e-5f64..1.0,
        ) {
            let s = TriStageSchedule::new(peak, warm, decay, warm + hold + decay).unwrap();
            // continuity: the discrete schedule is piecewise linear; evaluate the
            // continuous extension at each boundary from both sides
            let low = s.floor * peak;
            let left_warm = low + (peak - low) * 1.0;
            prop_assert!((left_warm - s.lr_at(warm)).abs() < 1e-12);
            let start = warm + hold;
            prop_assert!((s.lr_at(start) - peak).abs() < 1e-12);
            let end_left = peak - (peak - low) * 1.0;
            prop_assert!((end_left - s.lr_at(warm + hold + decay)).abs() < 1e-12);
            for step in warm..warm + hold + decay + 5 {
                prop_assert!(s.lr_at(step + 1) <= s.lr_at(step) + 1e-18);
            }
        }

        #[test]
        fn cosine_non_increasing_after_warmup(warm in 0usize..50, period in 1usize..500, base in 1e-6f64..1.0) {
            let s = CosineSchedule { base_lr: base, min_lr: base / 10.0, warmup_steps: warm, period_steps: period };
            prop_assert!((s.lr_at(warm) - base).abs() <= 1e-12 * base);
            prop_assert!((s.lr_at(warm + period) - base / 10.0).abs() <= 1e-12 * base);
            for step in warm..warm + period + 3 {
                prop_assert!(s.lr_at(step + 1) <= s.lr_at(step));
            }
        }
    }
}
