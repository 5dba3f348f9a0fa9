//! Count-based anti-exploration penalties.
//!
//! `p = β·ln(t) / √max(n, n_floor)`: zero at the first step, growing
//! with the training clock and shrinking as a pair is seen more often.

use crate::error::{Error, Result};

/// Scale applied to the next-state penalty in the OOD target.
pub const NEXT_STATE_PENALTY_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub beta: f64,
    pub count_floor: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            count_floor: 1.0,
        }
    }
}

impl PenaltyConfig {
    pub fn new(beta: f64, count_floor: f64) -> Result<Self> {
        let cfg = Self { beta, count_floor };
        cfg.validate()?;
        Ok(cfg)
    }

    /// β = 0 is accepted so ablations can switch the penalty off.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("penalty beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.count_floor >= 1.0) {
            return Err(Error::Config(format!(
                "count floor must be ≥ 1, got {}",
                self.count_floor
            )));
        }
        Ok(())
    }

    pub fn penalty(&self, count: f64, step: u64) -> f64 {
        penalty(count, step, self.beta, self.count_floor)
    }
}

/// Scheduled penalty for a pair seen `count` times at training step `step ≥ 1`.
pub fn penalty(count: f64, step: u64, beta: f64, count_floor: f64) -> f64 {
    debug_assert!(step >= 1, "training clock starts at 1");
    let t = step.max(1) as f64;
    beta * t.ln() / count.max(count_floor).sqrt()
}

/// Unscheduled reference form `β / √n`.
pub fn unscheduled_penalty(count: f64, beta: f64, count_floor: f64) -> f64 {
    beta / count.max(count_floor).sqrt()
}

/// Regression targets for the OOD critic term: the current-state value
/// shrunk by `p` and the next-state target value shrunk by `0.1·p'`, both
/// floored at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodTargets {
    pub current: f64,
    pub next: f64,
}

pub fn ood_targets(q_current: f64, q_next_target: f64, p: f64, p_next: f64) -> OodTargets {
    debug_assert!(p >= 0.0 && p_next >= 0.0);
    OodTargets {
        current: (q_current - p).max(0.0),
        next: (q_next_target - NEXT_STATE_PENALTY_SCALE * p_next).max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_has_no_penalty() {
        for n in [0.0, 1.0, 7.0, 1e6] {
            assert_eq!(penalty(n, 1, 3.0, 1.0), 0.0);
        }
    }

    #[test]
    fn penalty_by_hand() {
        // β=1, t=e, n=4: ln(e)/√4 = 0.5. The clock is an integer, so
        // evaluate the closed form at t = e directly.
        let p = 1.0 * std::f64::consts::E.ln() / 4.0f64.sqrt();
        assert!((p - 0.5).abs() < 1e-15);
        let at_3 = penalty(4.0, 3, 1.0, 1.0);
        assert!((at_3 - 3.0f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn doubling_count_scales_by_inverse_sqrt_two() {
        let a = penalty(8.0, 100, 0.7, 1.0);
        let b = penalty(16.0, 100, 0.7, 1.0);
        assert!((b / a - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quadrupling_count_halves_penalty() {
        for n in [1.0, 3.0, 250.0] {
            let a = penalty(n, 1000, 0.2, 1.0);
            let b = penalty(4.0 * n, 1000, 0.2, 1.0);
            assert!((b / a - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unseen_pairs_use_the_floor() {
        assert_eq!(penalty(0.0, 50, 1.0, 1.0), 50f64.ln());
    }

    #[test]
    fn zero_penalties_leave_targets_alone() {
        let t = ood_targets(1.5, 2.5, 0.0, 0.0);
        assert_eq!((t.current, t.next), (1.5, 2.5));
    }

    #[test]
    fn targets_clamp_at_zero() {
        assert_eq!(ood_targets(1.0, 0.0, 5.0, 0.0).current, 0.0);
        assert_eq!(ood_targets(0.0, 2.0, 0.0, 10.0).next, 1.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PenaltyConfig::new(-1.0, 1.0).is_err());
        assert!(PenaltyConfig::new(1.0, 0.5).is_err());
        assert!(PenaltyConfig::new(0.2, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn monotone_in_count_and_time(n in 0.0f64..1e4, dn in 0.0f64..1e3, t in 1u64..1_000_000, dt in 0u64..1000) {
            let p = penalty(n, t, 0.5, 1.0);
            prop_assert!(penalty(n + dn, t, 0.5, 1.0) <= p);
            prop_assert!(penalty(n, t + dt, 0.5, 1.0) >= p);
            prop_assert!(p >= 0.0);
            // Unseen pairs are penalized at least as hard as any seen pair.
            prop_assert!(penalty(0.0, t, 0.5, 1.0) >= p);
        }

        #[test]
        fn targets_never_negative(q in -1e3f64..1e3, qn in -1e3f64..1e3, p in 0.0f64..100.0, pn in 0.0f64..100.0) {
            let t = ood_targets(q, qn, p, pn);
            prop_assert!(t.current >= 0.0 && t.next >= 0.0);
        }
    }
}
