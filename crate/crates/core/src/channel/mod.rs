//! Delay distributions, the wire protocol, and the simulated and socket
//! transports between client and server.

mod sim;
pub mod socket;
mod wire;

pub use sim::{InFlight, SimChannel};
pub use wire::{decode, encode, MsgType, WireError, WireMessage, HEADER_LEN, MAGIC, VERSION};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    Constant,
    Uniform,
    Normal,
}

/// A delay distribution in milliseconds. As a channel section this
/// describes the round trip; [`DelaySpec::legs`] splits it per direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelaySpec {
    pub kind: DelayKind,
    pub mean_ms: f64,
    pub sigma_ms: f64,
    pub min_ms: f64,
    /// Fraction of the round trip spent on the uplink.
    pub split: f64,
}

impl Default for DelaySpec {
    fn default() -> Self {
        Self::constant(0.0)
    }
}

impl DelaySpec {
    pub fn constant(ms: f64) -> Self {
        Self {
            kind: DelayKind::Constant,
            mean_ms: ms,
            sigma_ms: 0.0,
            min_ms: 0.0,
            split: 0.5,
        }
    }

    pub fn normal(mean_ms: f64, sigma_ms: f64) -> Self {
        Self {
            kind: DelayKind::Normal,
            sigma_ms,
            ..Self::constant(mean_ms)
        }
    }

    pub fn uniform(mean_ms: f64, sigma_ms: f64) -> Self {
        Self {
            kind: DelayKind::Uniform,
            sigma_ms,
            ..Self::constant(mean_ms)
        }
    }

    /// Round trip of exactly `frames` frame periods.
    pub fn frames(frames: u32, fps: u32) -> Self {
        Self::constant(frames as f64 * 1000.0 / fps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean_ms.is_finite()
            && self.mean_ms >= 0.0
            && self.sigma_ms.is_finite()
            && self.sigma_ms >= 0.0
            && self.min_ms.is_finite()
            && self.min_ms >= 0.0
            && self.split > 0.0
            && self.split < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid delay spec {self:?}")))
        }
    }

    /// One-way specs `(uplink, downlink)`. Mean and minimum scale with the
    /// split fraction and sigma with its square root, so the two legs sum
    /// to the round-trip mean and variance.
    pub fn legs(&self) -> (DelaySpec, DelaySpec) {
        let leg = |f: f64| DelaySpec {
            mean_ms: self.mean_ms * f,
            sigma_ms: self.sigma_ms * f.sqrt(),
            min_ms: self.min_ms * f,
            ..*self
        };
        (leg(self.split), leg(1.0 - self.split))
    }
}

/// Draw one delay in ms, clamped at `min_ms`.
pub fn sample_delay(spec: &DelaySpec, rng: &mut impl Rng) -> f64 {
    let raw = match spec.kind {
        DelayKind::Constant => spec.mean_ms,
        _ if spec.sigma_ms == 0.0 => spec.mean_ms,
        DelayKind::Uniform => {
            let half = spec.sigma_ms * 3f64.sqrt();
            rng.random_range(spec.mean_ms - half..=spec.mean_ms + half)
        }
        DelayKind::Normal => Normal::new(spec.mean_ms, spec.sigma_ms)
            .expect("finite sigma")
            .sample(rng),
    };
    raw.max(spec.min_ms)
}

/// Milliseconds to whole microseconds, rounding down.
pub fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).floor().max(0.0) as u64
}

/// Delay in frames for a delay in ms: `round(ms * fps / 1000)`.
pub fn ms_to_frames(ms: f64, fps: u32) -> usize {
    (ms * fps as f64 / 1000.0).round().max(0.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = DelaySpec::constant(100.0);
        assert!((0..100).all(|_| sample_delay(&spec, &mut rng) == 100.0));
    }

    #[test]
    fn zero_sigma_normal_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = DelaySpec::normal(42.0, 0.0);
        assert!((0..100).all(|_| sample_delay(&spec, &mut rng) == 42.0));
    }

    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn clamped_normal_mean_matches_closed_form() {
        use statrs::distribution::{ContinuousCDF, Normal as SNormal};
        let (mu, sigma, floor) = (33.0, 15.0, 0.0);
        let a = (floor - mu) / sigma;
        let big_phi = SNormal::new(0.0, 1.0).unwrap().cdf(a);
        // E[max(X, m)] = m Phi(a) + mu (1 - Phi(a)) + sigma phi(a)
        let expected = floor * big_phi + mu * (1.0 - big_phi) + sigma * phi(a);
        let spec = DelaySpec::normal(mu, sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_delay(&spec, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - expected).abs() < 1.0, "{mean} vs {expected}");
    }

    #[test]
    fn uniform_stays_in_range_with_matching_moments() {
        let spec = DelaySpec::uniform(50.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..50_000).map(|_| sample_delay(&spec, &mut rng)).collect();
        let half = 10.0 * 3f64.sqrt();
        assert!(xs.iter().all(|&x| (50.0 - half..=50.0 + half).contains(&x)));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((mean - 50.0).abs() < 0.2);
        assert!((var.sqrt() - 10.0).abs() < 0.2);
    }

    #[test]
    fn legs_preserve_round_trip_moments() {
        let spec = DelaySpec {
            split: 0.3,
            min_ms: 10.0,
            ..DelaySpec::normal(100.0, 20.0)
        };
        let (up, down) = spec.legs();
        assert!((up.mean_ms + down.mean_ms - 100.0).abs() < 1e-12);
        assert!((up.sigma_ms.powi(2) + down.sigma_ms.powi(2) - 400.0).abs() < 1e-9);
        assert!((up.min_ms + down.min_ms - 10.0).abs() < 1e-12);
    }

    #[test]
    fn frame_conversion() {
        assert_eq!(ms_to_frames(100.0, 30), 3);
        assert_eq!(ms_to_frames(165.0, 30), 5);
        assert_eq!(ms_to_frames(0.0, 30), 0);
        assert_eq!(ms_to_us(33.3333), 33_333);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DelaySpec::constant(-1.0).validate().is_err());
        assert!(DelaySpec { split: 1.0, ..Default::default() }.validate().is_err());
        assert!(DelaySpec::normal(10.0, 2.0).validate().is_ok());
    }
}
