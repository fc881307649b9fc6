//! Learning-rate schedules indexed by 0-based optimiser step.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    /// Linear warmup to `base` over `warmup` steps, then cosine decay that
    /// lands on `final_lr` at step `total − 1`.
    Cosine {
        base: f64,
        final_lr: f64,
        warmup: usize,
        total: usize,
    },
    Constant {
        lr: f64,
    },
}

/// `⌈ratio · total⌉` warmup steps.
pub fn warmup_steps(ratio: f64, total: usize) -> usize {
    ((ratio * total as f64).ceil() as usize).min(total)
}

impl LrSchedule {
    pub fn cosine(base: f64, final_lr: f64, warmup_ratio: f64, total: usize) -> Self {
        LrSchedule::Cosine {
            base,
            final_lr,
            warmup: warmup_steps(warmup_ratio, total),
            total,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                base,
                final_lr,
                warmup,
                total,
            } => {
                if step < warmup {
                    return base * ((step + 1) as f64 / warmup as f64);
                }
                let span = total.saturating_sub(warmup + 1);
                let t = step - warmup;
                if t >= span {
                    return final_lr;
                }
                if t == 0 {
                    return base;
                }
                final_lr + (base - final_lr) * (1.0 + (PI * t as f64 / span as f64).cos()) / 2.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_are_exact() {
        let s = LrSchedule::cosine(0.01, 0.001, 0.01, 1000);
        // ⌈0.01 · 1000⌉ = 10 warmup steps
        assert!((s.lr_at(0) - 0.001).abs() < 1e-18);
        assert_eq!(s.lr_at(9), 0.01);
        assert_eq!(s.lr_at(10), 0.01);
        assert_eq!(s.lr_at(999), 0.001);
    }

    #[test]
    fn cosine_midpoint_is_the_mean() {
        // 1 warmup step, then 100 decay steps over a span of 100
        let s = LrSchedule::Cosine {
            base: 1.0,
            final_lr: 0.0,
            warmup: 1,
            total: 102,
        };
        assert!((s.lr_at(51) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_monotone_after_warmup() {
        let s = LrSchedule::cosine(0.01, 0.001, 0.05, 300);
        let lrs: Vec<f64> = (15..300).map(|i| s.lr_at(i)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ratio_zero_means_no_warmup() {
        let s = LrSchedule::cosine(0.5, 0.1, 0.0, 10);
        assert_eq!(s.lr_at(0), 0.5);
        assert_eq!(s.lr_at(9), 0.1);
    }

    #[test]
    fn single_step_run_ends_at_final() {
        let s = LrSchedule::cosine(0.5, 0.1, 0.0, 1);
        assert_eq!(s.lr_at(0), 0.1);
    }

    #[test]
    fn constant_never_changes() {
        let s = LrSchedule::Constant { lr: 1e-4 };
        assert!((0..50).all(|i| s.lr_at(i) == 1e-4));
    }
}
