//! Blending weight maps `W_b`.

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Largest value a blend weight may take; weights stay strictly below 1.
pub const BLEND_MAX: f64 = 1.0 - f64::EPSILON;

/// Rectangle whose weights are raised to `base_t + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub delta: f64,
}

/// Single-channel `H x W` weight map, broadcast over colour channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMap {
    pub height: usize,
    pub width: usize,
    pub base_t: f64,
    pub regions: Vec<BlendRegion>,
    /// True when the configured region size had to shrink to fit the image.
    pub regions_shrunk: bool,
    values: Vec<f64>,
}

impl BlendMap {
    /// Builds the map from a base value and adjusted regions.
    ///
    /// A region sets its pixels to `base_t + delta`; where regions overlap the
    /// later one wins, so no pixel exceeds `base_t + max(delta)`.
    pub fn build(
        height: usize,
        width: usize,
        base_t: f64,
        regions: Vec<BlendRegion>,
        regions_shrunk: bool,
    ) -> Result<Self> {
        if !(base_t > 0.0 && base_t < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "base blend weight {base_t} outside (0, 1)"
            )));
        }
        let mut values = vec![base_t; height * width];
        for r in &regions {
            if r.top + r.height > height || r.left + r.width > width {
                return Err(Error::DimensionMismatch(format!(
                    "blend region {r:?} exceeds {height}x{width}"
                )));
            }
            let v = (base_t + r.delta).clamp(f64::MIN_POSITIVE, BLEND_MAX);
            for y in r.top..r.top + r.height {
                values[y * width + r.left..y * width + r.left + r.width].fill(v);
            }
        }
        Ok(Self {
            height,
            width,
            base_t,
            regions,
            regions_shrunk,
            values,
        })
    }

    /// Uniform map with no adjusted regions.
    pub fn constant(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::build(height, width, t, Vec::new(), false)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Draws `t ~ U[T_low, T_high]` and the adjusted regions.
pub fn gen_blend_map(
    height: usize,
    width: usize,
    rng: &mut RngStream,
    cfg: &AugConfig,
) -> Result<BlendMap> {
    let base_t = rng.uniform_range(cfg.t_low, cfg.t_high);
    let rh = cfg.blend_region_size.min(height);
    let rw = cfg.blend_region_size.min(width);
    let shrunk = rh < cfg.blend_region_size || rw < cfg.blend_region_size;
    let [lo, hi] = cfg.blend_perturbation;
    let regions = (0..cfg.blend_regions)
        .map(|_| {
            let top = rng.int_inclusive(0, height - rh);
            let left = rng.int_inclusive(0, width - rw);
            let delta = rng.uniform_range(lo, hi);
            BlendRegion {
                top,
                left,
                height: rh,
                width: rw,
                delta,
            }
        })
        .collect();
    BlendMap::build(height, width, base_t, regions, shrunk)
}
