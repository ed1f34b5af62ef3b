//! Truncated Gaussian noise term.

use crate::augment::AugConfig;
use crate::rng::RngStream;

/// Upper cut-off of the standard normal before scaling.
pub const TRUNCATION: f64 = 3.0;

/// `H x W x C` non-negative noise, every value in `[0, 3 * weight]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub weight: f64,
    values: Vec<f64>,
}

impl NoiseField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            weight: 0.0,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_values(
        height: usize,
        width: usize,
        channels: usize,
        weight: f64,
        values: Vec<f64>,
    ) -> Option<Self> {
        (values.len() == height * width * channels).then_some(Self {
            height,
            width,
            channels,
            weight,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        TRUNCATION * self.weight
    }
}

/// One standard-normal draw restricted to `[0, 3]`.
///
/// The normal is symmetric, so folding `|z|` and rejecting only the upper
/// tail gives the same law as rejecting negatives, at half the draws.
pub fn truncated_standard_normal(rng: &mut RngStream) -> f64 {
    loop {
        let z = rng.standard_normal().abs();
        if z <= TRUNCATION {
            return z;
        }
    }
}

/// Noise with an explicit weight `W_eps`.
pub fn truncated_noise(
    height: usize,
    width: usize,
    channels: usize,
    weight: f64,
    rng: &mut RngStream,
) -> NoiseField {
    if weight == 0.0 {
        return NoiseField::zeros(height, width, channels);
    }
    let bound = TRUNCATION * weight;
    let values = (0..height * width * channels)
        .map(|_| (truncated_standard_normal(rng) * weight).min(bound))
        .collect();
    NoiseField {
        height,
        width,
        channels,
        weight,
        values,
    }
}

/// Noise with weight `W_n * T_high` (severe) or `non_severe_W_n * T_high`.
pub fn gen_noise(
    dims: (usize, usize, usize),
    rng: &mut RngStream,
    cfg: &AugConfig,
    severe: bool,
) -> NoiseField {
    truncated_noise(dims.0, dims.1, dims.2, cfg.noise_weight(severe), rng)
}
