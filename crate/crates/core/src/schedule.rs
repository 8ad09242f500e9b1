//! Noise schedules and the closed-form diffusion algebra built on them.
//!
//! Arrays are indexed from 0. `alpha_bars[t]` is the product of `alphas[0..=t]`,
//! so the clean sample sits one step before index 0. A noised sample at index
//! `t + 1` is written `y_{t+1}` throughout, and the one-step reverse transition
//! goes from `y_{t+1}` to `y_t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Linear),
            _ => None,
        }
    }
}

/// Precomputed variance schedule.
///
/// Fields are private; a schedule never changes after [`DiffusionSchedule::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// A noised sample together with the array index it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub value: Vec<f64>,
    pub timestep: usize,
}

impl DiffusionSchedule {
    /// Builds a schedule with `steps` betas interpolated linearly from
    /// `beta_start` to `beta_end`, both inclusive.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidRange(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }

        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let span = (steps - 1) as f64;
                (0..steps)
                    .map(|i| {
                        if i == steps - 1 {
                            beta_end
                        } else {
                            beta_start + (beta_end - beta_start) * (i as f64 / span)
                        }
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        // sigma_0 is zero: there is no noised state before index 0.
        let sigmas = (0..steps)
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t]).sqrt()
                }
            })
            .collect();

        Ok(Self {
            beta_start,
            beta_end,
            kind,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(steps, beta_start, beta_end, ScheduleKind::Linear)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_t(&self, t: usize, lo: usize, hi: usize) -> Result<()> {
        if t < lo || t > hi {
            Err(Error::TimestepOutOfRange { t, lo, hi })
        } else {
            Ok(())
        }
    }

    /// Draws `y_{t+1} = sqrt(abar_{t+1}) y0 + sqrt(1 - abar_{t+1}) eps`.
    ///
    /// Valid for `0 <= t <= T - 2` so that index `t + 1` exists.
    pub fn marginal_sample(&self, y0: &[f64], t: usize, eps: &[f64]) -> Result<NoisySample> {
        self.check_t(t, 0, self.steps() - 2)?;
        check_dim(y0.len(), eps.len())?;
        let abar = self.alpha_bars[t + 1];
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let value = y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect();
        Ok(NoisySample {
            value,
            timestep: t + 1,
        })
    }

    /// Posterior-mean structure `sqrt(a_t / a_{t+1}) (y_{t+1} - b_{t+1} / sqrt(1 - abar_{t+1}) eps)`.
    ///
    /// With the true forward noise as `eps` this is the noise-free target the
    /// step-wise log-probability is evaluated at.
    pub fn posterior_mean(&self, y_next: &[f64], eps_next: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, 0, self.steps() - 2)?;
        check_dim(y_next.len(), eps_next.len())?;
        let scale = (self.alphas[t] / self.alphas[t + 1]).sqrt();
        let noise = self.betas[t + 1] / (1.0 - self.alpha_bars[t + 1]).sqrt();
        Ok(y_next
            .iter()
            .zip(eps_next)
            .map(|(y, e)| scale * (y - noise * e))
            .collect())
    }

    /// Factor multiplying the squared noise-prediction error in the step-wise
    /// log-probability: `0.5 * b_{t+1} a_t / ((1 - abar_t) a_{t+1})`.
    pub fn logprob_coefficient(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1, self.steps() - 2)?;
        Ok(step_coefficient(
            self.betas[t + 1],
            self.alphas[t],
            self.alpha_bars[t],
            self.alphas[t + 1],
        ))
    }

    /// Full Gaussian log-density of the reverse step evaluated at the posterior
    /// mean, given the squared error between predicted and true noise.
    pub fn step_log_prob(&self, t: usize, sq_error: f64, dim: usize) -> Result<f64> {
        let c = self.logprob_coefficient(t)?;
        let d = dim as f64;
        Ok(-c * sq_error
            - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            - d * self.sigmas[t + 1].ln())
    }

    /// Mean of the ancestral reverse step from index `k` to `k - 1`:
    /// `(y_k - b_k / sqrt(1 - abar_k) eps) / sqrt(a_k)`.
    pub fn reverse_mean(&self, y: &[f64], eps_pred: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_t(k, 0, self.steps() - 1)?;
        check_dim(y.len(), eps_pred.len())?;
        let inv = 1.0 / self.alphas[k].sqrt();
        let noise = self.betas[k] / (1.0 - self.alpha_bars[k]).sqrt();
        Ok(y.iter()
            .zip(eps_pred)
            .map(|(y, e)| inv * (y - noise * e))
            .collect())
    }
}

fn step_coefficient(beta_next: f64, alpha: f64, alpha_bar: f64, alpha_next: f64) -> f64 {
    0.5 * beta_next * alpha / ((1.0 - alpha_bar) * alpha_next)
}

/// Uniform draw from `{1, ..., T - 2}` (both ends inclusive), so that `t`
/// and `t + 1` both index valid schedule entries and `t >= 1`.
///
/// # Panics
///
/// Panics if `steps < 3`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    assert!(steps >= 3, "timestep sampling needs T >= 3, got {steps}");
    rng.random_range(1..=steps - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(steps: usize) -> DiffusionSchedule {
        DiffusionSchedule::linear(steps, 0.1, 0.1).unwrap()
    }

    #[test]
    fn constant_schedule_by_hand() {
        let s = constant(2);
        assert_eq!(s.betas(), &[0.1, 0.1]);
        assert_eq!(s.alphas(), &[0.9, 0.9]);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(
            DiffusionSchedule::linear(1, 0.1, 0.2),
            Err(Error::InvalidRange(_))
        ));
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn ddpm_default_invariants() {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[999], 0.02);
        for t in 0..1000 {
            assert_eq!(s.alphas()[t], 1.0 - s.betas()[t]);
            assert!(s.alpha_bars()[t] > 0.0 && s.alpha_bars()[t] < 1.0);
            if t > 0 {
                assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
                let rel = (s.alpha_bars()[t] - s.alpha_bars()[t - 1] * s.alphas()[t]).abs()
                    / s.alpha_bars()[t];
                assert!(rel < 1e-12);
                assert!(s.sigmas()[t] > 0.0);
            }
        }
        // Independent high-precision product (mpmath, 50 digits): 4.0358297653756833e-05.
        let last = s.alpha_bars()[999];
        assert!(last < 0.01);
        assert!((last - 4.035_829_765_375_683e-5).abs() / 4.035_829_765_375_683e-5 < 1e-8);
    }

    #[test]
    fn marginal_zero_noise_limit() {
        let s = DiffusionSchedule::linear(10, 1e-300, 1e-300).unwrap();
        let y = s.marginal_sample(&[1.5, -2.0], 3, &[0.7, 0.2]).unwrap();
        assert!((y.value[0] - 1.5).abs() < 1e-12);
        assert!((y.value[1] + 2.0).abs() < 1e-12);
        assert_eq!(y.timestep, 4);
    }

    #[test]
    fn marginal_examples() {
        let s = constant(3);
        let y = s.marginal_sample(&[1.0, 0.0], 0, &[0.0, 0.0]).unwrap();
        assert!((y.value[0] - 0.9).abs() < 1e-15);
        assert_eq!(y.value[1], 0.0);

        // abar = 0.25 after two steps of beta = 0.5.
        let s = DiffusionSchedule::linear(3, 0.5, 0.5).unwrap();
        let y = s.marginal_sample(&[1.0, 2.0], 0, &[-1.0, 1.0]).unwrap();
        // 0.5 - sqrt(0.75), 1 + sqrt(0.75)
        assert!((y.value[0] - (-0.366_025_403_784_438_6)).abs() < 1e-15);
        assert!((y.value[1] - 1.866_025_403_784_438_6).abs() < 1e-15);
    }

    #[test]
    fn marginal_errors() {
        let s = constant(4);
        assert!(matches!(
            s.marginal_sample(&[1.0], 0, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            s.marginal_sample(&[1.0], 3, &[1.0]),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn posterior_mean_examples() {
        let s = constant(3);
        let m = s.posterior_mean(&[0.3, -0.4], &[0.0, 0.0], 0).unwrap();
        assert_eq!(m, vec![0.3, -0.4]);

        let m = s.posterior_mean(&[1.0, 0.0], &[1.0, 0.0], 0).unwrap();
        // 1 - 0.1 / sqrt(0.19), evaluated with mpmath.
        assert!((m[0] - 0.770_584_266_129_438_2).abs() < 1e-15);
        assert_eq!(m[1], 0.0);

        let z = s.posterior_mean(&[0.0, 0.0], &[0.0, 0.0], 1).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        assert!(s.posterior_mean(&[0.0], &[0.0], 2).is_err());
    }

    #[test]
    fn logprob_coefficient_examples() {
        let s = constant(3);
        let c = s.logprob_coefficient(1).unwrap();
        assert!((c - 0.05 / 0.19).abs() < 1e-15);
        assert!(s.logprob_coefficient(0).is_err());
        assert!(s.logprob_coefficient(2).is_err());

        // beta_{t+1} -> 0 with the earlier entries held fixed drives the factor to zero.
        let mut prev = f64::INFINITY;
        for beta_next in [1e-2, 1e-4, 1e-6, 1e-8, 0.0] {
            let c = step_coefficient(beta_next, 0.9, 0.81, 1.0 - beta_next);
            assert!(c >= 0.0 && c < prev);
            prev = c;
        }
        assert_eq!(prev, 0.0);
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for t in 1..999 {
            assert!(s.logprob_coefficient(t).unwrap() > 0.0);
        }
    }

    #[test]
    fn timestep_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_timestep(&mut rng, 3), 1);
        }
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_timestep(&mut r, 100)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..50).map(|_| sample_timestep(&mut r, 100)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_uniformity() {
        let steps = 1000;
        let draws = 1_000_000;
        let mut counts = vec![0usize; steps];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..draws {
            counts[sample_timestep(&mut rng, steps)] += 1;
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[steps - 1], 0);
        let buckets = (steps - 2) as f64;
        let p = 1.0 / buckets;
        let expected = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts[1..steps - 1] {
            assert!((c as f64 - expected).abs() < 5.0 * sd);
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // chi-square with 997 dof: mean 997, sd ~44.6
        assert!((chi2 - (buckets - 1.0)).abs() < 5.0 * (2.0 * (buckets - 1.0)).sqrt());
    }
}
