//! Multiplicative observation noise and random subsampling.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::Trajectory;

/// Ranges from which per-example corruption levels are drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionRanges {
    pub noise_max: f64,
    pub subsample_max: f64,
}

impl Default for CorruptionRanges {
    fn default() -> Self {
        Self {
            noise_max: 0.1,
            subsample_max: 0.5,
        }
    }
}

impl CorruptionRanges {
    pub const NONE: CorruptionRanges = CorruptionRanges {
        noise_max: 0.0,
        subsample_max: 0.0,
    };

    pub fn sample(&self, rng: &mut impl Rng) -> CorruptionConfig {
        CorruptionConfig {
            noise_sigma: self.noise_max * rng.random::<f64>(),
            subsample_rho: self.subsample_max * rng.random::<f64>(),
        }
    }
}

/// One concrete corruption: noise standard deviation `σ` and dropped
/// fraction `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub noise_sigma: f64,
    pub subsample_rho: f64,
}

impl CorruptionConfig {
    pub const CLEAN: CorruptionConfig = CorruptionConfig {
        noise_sigma: 0.0,
        subsample_rho: 0.0,
    };

    pub fn new(noise_sigma: f64, subsample_rho: f64) -> Self {
        Self {
            noise_sigma,
            subsample_rho,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.noise_sigma == 0.0 && self.subsample_rho == 0.0
    }

    /// Noise first, then subsampling.
    pub fn apply(&self, traj: &Trajectory, rng: &mut impl Rng) -> Result<Trajectory, CorruptionError> {
        let noisy = add_noise(traj, self.noise_sigma, rng)?;
        subsample(&noisy, self.subsample_rho, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorruptionError {
    #[error("noise level must be non-negative and finite, got {0}")]
    NoiseLevel(f64),
    #[error("subsampling ratio must be in [0, 1), got {0}")]
    SubsampleRatio(f64),
    #[error("subsampling {n} points with ratio {rho} leaves {kept} (< 2)")]
    Degenerate { n: usize, rho: f64, kept: usize },
}

/// `x_j(t_i) -> (1 + ξ) x_j(t_i)` with `ξ ~ N(0, σ²)` drawn independently per
/// entry.
pub fn add_noise(traj: &Trajectory, sigma: f64, rng: &mut impl Rng) -> Result<Trajectory, CorruptionError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(CorruptionError::NoiseLevel(sigma));
    }
    if sigma == 0.0 {
        return Ok(traj.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let states = traj
        .states()
        .iter()
        .map(|&x| (1.0 + normal.sample(rng)) * x)
        .collect();
    Ok(traj.with_states(states))
}

/// Number of points kept when dropping a fraction `rho` of `n`.
pub fn retained_count(n: usize, rho: f64) -> usize {
    ((1.0 - rho) * n as f64).round() as usize
}

/// Keeps a uniformly random subset of `round((1-ρ)N)` points. The first
/// point is always kept, since rescaling anchors on it.
pub fn subsample(traj: &Trajectory, rho: f64, rng: &mut impl Rng) -> Result<Trajectory, CorruptionError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(CorruptionError::SubsampleRatio(rho));
    }
    let n = traj.len();
    let kept = retained_count(n, rho);
    if kept < 2 {
        return Err(CorruptionError::Degenerate { n, rho, kept });
    }
    if kept >= n {
        return Ok(traj.clone());
    }
    let mut idx: Vec<usize> = index::sample(rng, n - 1, kept - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    idx.push(0);
    idx.sort_unstable();
    Ok(traj.select(&idx).expect("subset of a valid trajectory"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::trajectory::linspace;

    fn ramp(n: usize, dim: usize) -> Trajectory {
        let times = linspace(1.0, 10.0, n);
        let states = (0..n * dim).map(|i| i as f64 - 3.0).collect();
        Trajectory::new(times, states, dim).unwrap()
    }

    #[test]
    fn identities() {
        let t = ramp(50, 2);
        let mut rng = seeded(0);
        assert_eq!(add_noise(&t, 0.0, &mut rng).unwrap(), t);
        assert_eq!(subsample(&t, 0.0, &mut rng).unwrap(), t);
        assert_eq!(CorruptionConfig::CLEAN.apply(&t, &mut rng).unwrap(), t);
    }

    #[test]
    fn noise_keeps_zeros_and_shape() {
        let t = ramp(20, 1);
        let noisy = add_noise(&t, 0.05, &mut seeded(3)).unwrap();
        assert_eq!(noisy.times(), t.times());
        assert_eq!(noisy.len(), t.len());
        // state 3 is exactly zero
        assert_eq!(noisy.state(3)[0], 0.0);
    }

    #[test]
    fn subsample_counts() {
        let t = ramp(200, 1);
        let s = subsample(&t, 0.5, &mut seeded(1)).unwrap();
        assert_eq!(s.len(), 100);
        assert_eq!(s.times()[0], t.times()[0]);
        assert!(s.times().windows(2).all(|w| w[1] > w[0]));
        assert!(s.times().iter().all(|x| t.times().contains(x)));
    }

    #[test]
    fn subsample_errors() {
        let t = ramp(3, 1);
        assert!(matches!(
            subsample(&t, 0.9, &mut seeded(1)),
            Err(CorruptionError::Degenerate { .. })
        ));
        assert!(subsample(&t, 1.0, &mut seeded(1)).is_err());
        assert!(add_noise(&t, -0.1, &mut seeded(1)).is_err());
    }
}
