//! Discrete variance-preserving noise schedule.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
    /// Small offset keeping the first steps from being vanishingly small.
    pub cosine_offset: f64,
    /// Fraction of the cosine quarter-period used, so that `alpha(T) > 0`.
    pub truncation: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            cosine_offset: 0.008,
            truncation: 0.95,
        }
    }
}

/// Tabulated `alpha(t)` and `sigma(t)` for `t = 0..=T`.
///
/// `alpha(t)^2 = cos^2(phi(t)) / cos^2(phi(0))` with
/// `phi(t) = (truncation * t / T + offset) / (1 + offset) * pi / 2`, and
/// `sigma = sqrt(1 - alpha^2)`.
///
/// ```
/// use corredit::schedule::NoiseSchedule;
/// let s = NoiseSchedule::cosine(&Default::default()).unwrap();
/// let (a, sg) = s.lookup(0).unwrap();
/// assert_eq!((a, sg), (1.0, 0.0));
/// assert!(s.lookup(1000).unwrap().1 > 0.99);
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(config: &ScheduleConfig) -> Result<Self> {
        let &ScheduleConfig {
            t_max,
            cosine_offset: s,
            truncation,
        } = config;
        if t_max == 0 || !(0.0 < truncation && truncation < 1.0) || !(s >= 0.0) {
            return Err(Error::Config(format!("invalid schedule {config:?}")));
        }
        let phi = |t: usize| (truncation * t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        let c0 = phi(0).cos();
        let alphas: Vec<f64> = (0..=t_max).map(|t| phi(t).cos() / c0).collect();
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self { t_max, alphas, sigmas })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn lookup(&self, t: usize) -> Result<(f64, f64)> {
        if t > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} beyond T = {}",
                self.t_max
            )));
        }
        Ok((self.alphas[t], self.sigmas[t]))
    }

    /// SHA-256 over the little-endian table, for checkpoint metadata.
    pub fn table_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.alphas.iter().chain(&self.sigmas) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `steps` timesteps spaced uniformly from `T` down towards 0, including
    /// `T`: `T, T - T/steps, ..., T/steps`. The last DDIM hop goes to 0.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::InvalidArgument(format!(
                "cannot take {steps} steps over T = {}",
                self.t_max
            )));
        }
        Ok((0..steps)
            .map(|i| ((self.t_max * (steps - i)) as f64 / steps as f64).round() as usize)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_preserving_and_monotone() {
        let s = NoiseSchedule::cosine(&ScheduleConfig::default()).unwrap();
        for t in 0..=1000 {
            let (a, sg) = s.lookup(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(a < s.alphas()[t - 1] && sg > s.sigmas()[t - 1]);
            }
        }
        assert_eq!(s.lookup(0).unwrap(), (1.0, 0.0));
        // Closed form at T: cos(0.958/1.008 * pi/2) / cos(0.008/1.008 * pi/2).
        let expected = (0.958f64 / 1.008 * std::f64::consts::FRAC_PI_2).cos()
            / (0.008f64 / 1.008 * std::f64::consts::FRAC_PI_2).cos();
        assert!((s.lookup(1000).unwrap().0 - expected).abs() < 1e-15);
        assert!(s.lookup(1000).unwrap().1 > 0.99);
        assert!(s.lookup(1001).is_err());
    }

    #[test]
    fn sampling_grid_is_uniform_and_starts_at_t() {
        let s = NoiseSchedule::cosine(&ScheduleConfig::default()).unwrap();
        let ts = s.sampling_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[19], 50);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 50));
        assert!(s.sampling_timesteps(0).is_err());
    }
}
