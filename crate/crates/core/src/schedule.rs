//! Diffusion noise schedule: the β_t / α_t / ᾱ_t tables.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;

/// Tables defining the forward diffusion. Indexing convention: `beta(t)` and
/// `alpha(t)` are defined for t in 1..=T; `alpha_bar(t)` for t in 0..=T with
/// `alpha_bar(0) == 1`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule<F: Scalar> {
    steps: usize,
    betas: Vec<F>,
    alphas: Vec<F>,
    alpha_bars: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Linear β interpolation from `beta_min` to `beta_max` over `steps` steps.
    pub fn linear(steps: usize, beta_min: F, beta_max: F) -> Result<Self, Error> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > F::zero() && beta_min <= beta_max && beta_max < F::one()) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let frac = if steps == 1 {
                F::zero()
            } else {
                F::from_usize(i).unwrap() / F::from_usize(steps - 1).unwrap()
            };
            betas.push(beta_min + (beta_max - beta_min) * frac);
        }
        let alphas: Vec<F> = betas.iter().map(|&b| F::one() - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(F::one());
        let mut prod = F::one();
        for &a in &alphas {
            prod = prod * a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> F {
        assert!(t >= 1 && t <= self.steps, "beta index {t} out of 1..={}", self.steps);
        self.betas[t - 1]
    }

    /// α_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> F {
        assert!(t >= 1 && t <= self.steps, "alpha index {t} out of 1..={}", self.steps);
        self.alphas[t - 1]
    }

    /// ᾱ_t for t in 0..=T; ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> F {
        assert!(t <= self.steps, "alpha_bar index {t} out of 0..={}", self.steps);
        self.alpha_bars[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::<f64>::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_matches_running_product() {
        let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prod *= s.alpha(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_betas() {
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::<f64>::linear(0, 0.1, 0.2).is_err());
    }
}
