//! Gaussian mechanism on the combined unlearning gradient: global-norm
//! clipping, calibrated noise, and summary scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnlearnError};
use crate::model::GradientBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate_q: f64,
    pub clip_norm: f64,
    /// Noise standard deviation; zero when disabled.
    pub sigma: f64,
}

impl PrivacyParams {
    /// Enabled parameters with `sigma` calibrated from `(q, epsilon, delta)`.
    pub fn new(epsilon: f64, delta: f64, sampling_rate_q: f64, clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) {
            return Err(UnlearnError::InvalidPrivacyParams("clip norm must be positive".into()));
        }
        Ok(Self {
            enabled: true,
            epsilon,
            delta,
            sampling_rate_q,
            clip_norm,
            sigma: calibrate_sigma(sampling_rate_q, epsilon, delta)?,
        })
    }

    /// No clipping and no noise; epsilon is reported as infinite.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            epsilon: f64::INFINITY,
            delta: 0.0,
            sampling_rate_q: 1.0,
            clip_norm: f64::INFINITY,
            sigma: 0.0,
        }
    }

    /// Epsilon as seen by reporting: infinite when disabled.
    pub fn effective_epsilon(&self) -> f64 {
        if self.enabled {
            self.epsilon
        } else {
            f64::INFINITY
        }
    }
}

/// `sigma = q · sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn calibrate_sigma(q: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(UnlearnError::InvalidPrivacyParams(format!("q = {q} not in (0, 1]")));
    }
    if !(epsilon > 0.0) || epsilon.is_nan() {
        return Err(UnlearnError::InvalidPrivacyParams(format!("epsilon = {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(UnlearnError::InvalidPrivacyParams(format!("delta = {delta} not in (0, 1)")));
    }
    Ok(q * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Scales the whole bundle by `c / ‖g‖` when its global norm exceeds `c`.
pub fn clip(g: &GradientBundle, c: f64) -> GradientBundle {
    let mut out = g.clone();
    let norm = g.norm();
    if norm > c {
        out.scale(c / norm);
    }
    out
}

/// Seeded Gaussian stream. Identical seed and draw sequence give identical noise.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha8Rng,
    drawn: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of standard-normal draws consumed so far.
    pub fn position(&self) -> u64 {
        self.drawn
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.drawn += 1;
        StandardNormal.sample(&mut self.rng)
    }
}

/// Adds i.i.d. `N(0, sigma²)` to every trainable coordinate. `sigma = 0` is the identity
/// and consumes no draws.
pub fn add_gaussian_noise(g: &GradientBundle, sigma: f64, src: &mut NoiseSource) -> GradientBundle {
    let mut out = g.clone();
    if sigma == 0.0 {
        return out;
    }
    for t in out.per_group.values_mut() {
        for x in t.iter_mut() {
            *x += sigma * src.standard_normal();
        }
    }
    out
}

/// `1 / (1 + epsilon)`, zero for infinite epsilon.
pub fn dp_strength(epsilon: f64) -> f64 {
    if epsilon.is_infinite() {
        0.0
    } else {
        1.0 / (1.0 + epsilon)
    }
}
