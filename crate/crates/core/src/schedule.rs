//! Noise schedules α_t and stratified time sampling.

use std::f64::consts::{E, FRAC_PI_2, FRAC_PI_4};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;

/// Survival function α_t = 1 − mask_prob(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Linear,
    /// Mask rate interpolates linearly from β at t=0 to ω at t=1.
    Clipped {
        beta: f64,
        omega: f64,
    },
    /// mask_prob = ln(1 + t(e − 1))
    Logarithmic,
    /// mask_prob = √t
    SquareRoot,
    /// mask_prob = t²
    Square,
    /// mask_prob = 1 − cos(πt/2)
    Cosine,
    /// Every token masked with unit loss weight, regardless of t.
    FullMask,
}

/// One sampled diffusion time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDraw {
    pub t: f64,
    pub mask_prob: f64,
    /// α′_t / (1 − α_t); nonpositive.
    pub weight: f64,
}

impl TimeDraw {
    /// Nonnegative multiplier applied to the masked cross-entropy.
    pub fn loss_weight(&self) -> f64 {
        -self.weight
    }
}

impl NoiseSchedule {
    pub fn clipped(beta: f64, omega: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) || !(0.0..=1.0).contains(&omega) || beta >= omega {
            return Err(Bd3Error::config(format!(
                "clipped schedule needs 0 <= beta < omega <= 1, got ({beta}, {omega})"
            )));
        }
        Ok(Self::Clipped { beta, omega })
    }

    /// Checks the clipped bounds of a deserialized schedule.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Clipped { beta, omega } => Self::clipped(beta, omega).map(|_| ()),
            _ => Ok(()),
        }
    }

    pub fn full_support_kinds() -> [NoiseSchedule; 5] {
        [Self::Linear, Self::Logarithmic, Self::SquareRoot, Self::Square, Self::Cosine]
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Bd3Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn mask_prob(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(match *self {
            Self::Linear => t,
            Self::Clipped { beta, omega } => beta + (omega - beta) * t,
            Self::Logarithmic => (1.0 + t * (E - 1.0)).ln(),
            Self::SquareRoot => t.sqrt(),
            Self::Square => t * t,
            // 1 − cos(πt/2) without cancellation near t = 0
            Self::Cosine => 2.0 * (FRAC_PI_4 * t).sin().powi(2),
            Self::FullMask => 1.0,
        })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(1.0 - self.mask_prob(t)?)
    }

    /// dα/dt.
    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(match *self {
            Self::Linear => -1.0,
            Self::Clipped { beta, omega } => -(omega - beta),
            Self::Logarithmic => -(E - 1.0) / (1.0 + t * (E - 1.0)),
            Self::SquareRoot => -0.5 / t.sqrt(),
            Self::Square => -2.0 * t,
            Self::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            Self::FullMask => 0.0,
        })
    }

    pub fn draw(&self, t: f64) -> Result<TimeDraw> {
        let mask_prob = self.mask_prob(t)?;
        if *self == Self::FullMask {
            return Ok(TimeDraw {
                t,
                mask_prob,
                weight: -1.0,
            });
        }
        if mask_prob <= 0.0 {
            return Err(Bd3Error::DegenerateTime(t));
        }
        Ok(TimeDraw {
            t,
            mask_prob,
            weight: self.alpha_prime(t)? / mask_prob,
        })
    }

    /// Mask-rate support (β, ω).
    pub fn mask_range(&self) -> (f64, f64) {
        match *self {
            Self::Clipped { beta, omega } => (beta, omega),
            Self::FullMask => (1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn is_full_support(&self) -> bool {
        self.mask_range() == (0.0, 1.0)
    }
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear => write!(f, "linear"),
            Self::Clipped { beta, omega } => write!(f, "clipped[{beta},{omega}]"),
            Self::Logarithmic => write!(f, "log"),
            Self::SquareRoot => write!(f, "sqrt"),
            Self::Square => write!(f, "square"),
            Self::Cosine => write!(f, "cosine"),
            Self::FullMask => write!(f, "full_mask"),
        }
    }
}

/// Stratified times: draw `(k, b)` lies in stratum `k·B + b` of `K·B`
/// equal subintervals of [0, 1]. Zero draws are rejected.
pub fn low_discrepancy_times(k: usize, b: usize, rng: &mut SplitRng) -> Vec<Vec<f64>> {
    let n = (k * b) as f64;
    (0..k)
        .map(|i| (0..b).map(|j| ((i * b + j) as f64 + rng.uniform_open()) / n).collect())
        .collect()
}

/// All valid (β, ω) pairs with β < ω as clipped schedules.
pub fn clipped_grid(betas: &[f64], omegas: &[f64]) -> Result<Vec<NoiseSchedule>> {
    let mut out = Vec::new();
    for &beta in betas {
        for &omega in omegas {
            if let Ok(s) = NoiseSchedule::clipped(beta, omega) {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(Bd3Error::config("schedule grid has no valid (beta, omega) pair"));
    }
    Ok(out)
}

pub const DEFAULT_GRID_BETAS: [f64; 4] = [0.0, 0.15, 0.3, 0.45];
pub const DEFAULT_GRID_OMEGAS: [f64; 5] = [0.5, 0.65, 0.8, 0.95, 1.0];

pub fn default_grid() -> Vec<NoiseSchedule> {
    clipped_grid(&DEFAULT_GRID_BETAS, &DEFAULT_GRID_OMEGAS).expect("default grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: [NoiseSchedule; 7] = [
        NoiseSchedule::Linear,
        NoiseSchedule::Clipped { beta: 0.3, omega: 0.8 },
        NoiseSchedule::Clipped { beta: 0.45, omega: 0.95 },
        NoiseSchedule::Logarithmic,
        NoiseSchedule::SquareRoot,
        NoiseSchedule::Square,
        NoiseSchedule::Cosine,
    ];

    #[test]
    fn alpha_examples() {
        assert_eq!(NoiseSchedule::Linear.alpha(0.5).unwrap(), 0.5);
        let c = NoiseSchedule::clipped(0.3, 0.8).unwrap();
        assert!((c.mask_prob(0.0).unwrap() - 0.3).abs() < 1e-15);
        assert!((c.mask_prob(1.0).unwrap() - 0.8).abs() < 1e-15);
        let degenerate = NoiseSchedule::clipped(0.0, 1.0).unwrap();
        for t in [0.0, 0.1, 0.77, 1.0] {
            assert_eq!(degenerate.alpha(t).unwrap(), NoiseSchedule::Linear.alpha(t).unwrap());
        }
        assert!(matches!(NoiseSchedule::Linear.alpha(1.5), Err(Bd3Error::Domain(_))));
    }

    #[test]
    fn endpoints_of_full_support_kinds() {
        for s in NoiseSchedule::full_support_kinds() {
            assert!((s.alpha(0.0).unwrap() - 1.0).abs() < 1e-15, "{s}");
            assert!(s.alpha(1.0).unwrap().abs() < 1e-15, "{s}");
        }
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(NoiseSchedule::Linear.alpha_prime(0.3).unwrap(), -1.0);
        let c = NoiseSchedule::clipped(0.45, 0.95).unwrap();
        assert!((c.alpha_prime(0.2).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-6;
        for s in ALL {
            for i in 1..20 {
                let t = i as f64 / 20.0;
                let fd = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
                let a = s.alpha_prime(t).unwrap();
                assert!((fd - a).abs() / a.abs() < 1e-6, "{s} at {t}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn linear_expected_mask_rate() {
        let mut rng = SplitRng::new(4);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| NoiseSchedule::Linear.mask_prob(rng.uniform()).unwrap()).sum::<f64>() / n as f64;
        let sigma = (1.0f64 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn degenerate_time_rejected() {
        assert!(matches!(NoiseSchedule::Linear.draw(0.0), Err(Bd3Error::DegenerateTime(_))));
        let full = NoiseSchedule::FullMask.draw(0.0).unwrap();
        assert_eq!((full.mask_prob, full.loss_weight()), (1.0, 1.0));
    }

    #[test]
    fn stratified_times() {
        let mut rng = SplitRng::new(1);
        let t = low_discrepancy_times(1, 1, &mut rng);
        assert!(t[0][0] > 0.0 && t[0][0] < 1.0);
        for seed in 0..10_000 {
            let mut rng = SplitRng::new(seed);
            let (k, b) = (2 + (seed as usize % 3), 1 + (seed as usize % 4));
            let t = low_discrepancy_times(k, b, &mut rng);
            for i in 0..k {
                for j in 0..b {
                    let s = (i * b + j) as f64;
                    let n = (k * b) as f64;
                    assert!(t[i][j] > s / n && t[i][j] <= (s + 1.0) / n);
                }
            }
        }
        let q = low_discrepancy_times(2, 2, &mut rng);
        let flat: Vec<f64> = q.into_iter().flatten().collect();
        for (i, v) in flat.iter().enumerate() {
            assert_eq!((v * 4.0).floor() as usize, i);
        }
    }

    #[test]
    fn grid_enumeration() {
        let g = clipped_grid(&[0.0, 0.3, 0.5], &[0.5, 0.8, 1.0]).unwrap();
        assert_eq!(g.len(), 8);
        assert!(!g.contains(&NoiseSchedule::Clipped { beta: 0.5, omega: 0.5 }));
        let single = clipped_grid(&[0.0], &[1.0]).unwrap();
        assert_eq!(single[0].mask_prob(0.37).unwrap(), 0.37);
        assert!(clipped_grid(&[0.9], &[0.5]).is_err());
        for (b, o) in [(0.0, 0.5), (0.3, 0.8), (0.5, 1.0), (0.0, 1.0)] {
            assert!(clipped_grid(&[b], &[o]).is_ok());
        }
    }

    proptest! {
        #[test]
        fn alpha_strictly_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            for s in ALL {
                prop_assert!(s.alpha(lo).unwrap() > s.alpha(hi).unwrap(), "{}", s);
            }
        }
    }
}
