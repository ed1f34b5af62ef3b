//! Nighttime degradation synthesis.
//!
//! A clear image `J` is degraded as
//!
//! ```text
//! I = W_b * J + (1 - W_b) * L + eps
//! ```
//!
//! where `L` is an atmospheric light map with Gaussian glow spots, `W_b` a
//! blending weight map in `(0, 1)` and `eps` truncated Gaussian noise in
//! `[0, 3 * W_n * T_high]`. The composed image is clamped to `[0, 1]`.
//!
//! Every random draw is captured in an [`AugRecord`]; [`replay`] rebuilds the
//! degraded image from a record bit for bit.

pub mod blend;
pub mod light;
pub mod noise;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_unit, minmax_normalize, Image};
use crate::rng::RngStream;

pub use blend::{gen_blend_map, BlendMap, BlendRegion};
pub use light::{
    add_glow, apply_glows, sample_glows, sample_light_map, GlowSpot, LightBank, LightMap,
    LightSource, ProceduralField,
};
pub use noise::{gen_noise, truncated_noise, NoiseField};

/// Parameters of the degradation model. Defaults are the severe training
/// settings: `T_low = 0.001`, `T_high = 0.1`, `W_n = 0.1`, 2-10 glow spots
/// with kernels of 15-80 px, and eight 64x64 blend regions perturbed by
/// `U(0, 0.04)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub w_n: f64,
    /// Inclusive range for the number of glow spots.
    pub glow_regions: [usize; 2],
    /// Inclusive range for the glow kernel size in pixels.
    pub glow_kernel: [usize; 2],
    pub blend_regions: usize,
    pub blend_region_size: usize,
    pub blend_perturbation: [f64; 2],
    /// Probability that a sample is severely degraded.
    pub severity_ratio: f64,
    /// `W_n` used for non-severe samples.
    pub non_severe_w_n: f64,
    /// Glow amplitude multiplier for non-severe samples.
    pub non_severe_glow_scale: f64,
    /// Synthesize a light field when no light-map bank is available.
    pub procedural_fallback: bool,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            t_low: 0.001,
            t_high: 0.1,
            w_n: 0.1,
            glow_regions: [2, 10],
            glow_kernel: [15, 80],
            blend_regions: 8,
            blend_region_size: 64,
            blend_perturbation: [0.0, 0.04],
            severity_ratio: 1.0,
            non_severe_w_n: 0.01,
            non_severe_glow_scale: 0.5,
            procedural_fallback: true,
        }
    }
}

impl AugConfig {
    /// Same pipeline, never severe.
    pub fn non_severe() -> Self {
        Self {
            severity_ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0 < self.t_low && self.t_low < self.t_high && self.t_high < 1.0) {
            return bad(format!(
                "need 0 < t_low < t_high < 1, got t_low={} t_high={}",
                self.t_low, self.t_high
            ));
        }
        if !(self.w_n >= 0.0 && self.w_n.is_finite()) {
            return bad(format!("w_n must be finite and non-negative, got {}", self.w_n));
        }
        if !(self.non_severe_w_n >= 0.0 && self.non_severe_w_n.is_finite()) {
            return bad(format!(
                "non_severe_w_n must be finite and non-negative, got {}",
                self.non_severe_w_n
            ));
        }
        if !(0.0..=1.0).contains(&self.severity_ratio) {
            return bad(format!(
                "severity_ratio must lie in [0, 1], got {}",
                self.severity_ratio
            ));
        }
        if self.glow_regions[0] > self.glow_regions[1] {
            return bad(format!("empty glow_regions range {:?}", self.glow_regions));
        }
        if self.glow_kernel[0] == 0 || self.glow_kernel[0] > self.glow_kernel[1] {
            return bad(format!("invalid glow_kernel range {:?}", self.glow_kernel));
        }
        let [lo, hi] = self.blend_perturbation;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid blend_perturbation {:?}", self.blend_perturbation));
        }
        if self.blend_region_size == 0 {
            return bad("blend_region_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.non_severe_glow_scale) {
            return bad(format!(
                "non_severe_glow_scale must lie in [0, 1], got {}",
                self.non_severe_glow_scale
            ));
        }
        Ok(())
    }

    /// `W_eps` for the given severity.
    pub fn noise_weight(&self, severe: bool) -> f64 {
        let w_n = if severe { self.w_n } else { self.non_severe_w_n };
        w_n * self.t_high
    }
}

/// Everything drawn while degrading one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub severe: bool,
    pub light_source: LightSource,
    pub glows: Vec<GlowSpot>,
    pub base_t: f64,
    pub blend_regions: Vec<BlendRegion>,
    pub blend_regions_shrunk: bool,
    pub noise_seed: u64,
    pub noise_weight: f64,
    pub t_low: f64,
    pub t_high: f64,
    pub w_n: f64,
    /// The clear input was constant and normalized to zeros.
    pub degenerate_input: bool,
}

impl AugRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `I = W_b * J + (1 - W_b) * L + eps`, clamped to `[0, 1]`.
pub fn compose(j: &Image, wb: &BlendMap, l: &Image, eps: &NoiseField) -> Result<Image> {
    let (h, w, c) = j.dims();
    if l.dims() != (h, w, c) {
        return Err(Error::DimensionMismatch(format!(
            "clear {:?} vs light map {:?}",
            j.dims(),
            l.dims()
        )));
    }
    if (wb.height, wb.width) != (h, w) {
        return Err(Error::DimensionMismatch(format!(
            "clear {h}x{w} vs blend map {}x{}",
            wb.height, wb.width
        )));
    }
    if (eps.height, eps.width, eps.channels) != (h, w, c) {
        return Err(Error::DimensionMismatch(format!(
            "clear {:?} vs noise {:?}",
            j.dims(),
            (eps.height, eps.width, eps.channels)
        )));
    }
    let data = j
        .data()
        .chunks_exact(c)
        .zip(l.data().chunks_exact(c))
        .zip(eps.values().chunks_exact(c))
        .zip(wb.values())
        .flat_map(|(((jp, lp), ep), &b)| {
            (0..c).map(move |k| clamp_unit(b * jp[k] + (1.0 - b) * lp[k] + ep[k]))
        })
        .collect();
    Image::new(h, w, c, data)
}

/// Degrades `j` with freshly drawn parameters.
///
/// The clear image is min-max normalized first; the returned record replays
/// to the identical output via [`replay`].
pub fn augment(
    j: &Image,
    cfg: &AugConfig,
    rng: &mut RngStream,
    bank: &LightBank,
) -> Result<(Image, AugRecord)> {
    cfg.validate()?;
    let (h, w, c) = j.dims();
    let severe = rng.bernoulli(cfg.severity_ratio);
    let light_source = light::sample_light_source(bank, c, rng, cfg.procedural_fallback)?;
    let glows = sample_glows(h, w, rng, cfg, severe);
    let blend = gen_blend_map(h, w, rng, cfg)?;
    let noise_seed = rng.next_u64();
    let normalized = minmax_normalize(j);
    let record = AugRecord {
        height: h,
        width: w,
        channels: c,
        severe,
        light_source,
        glows,
        base_t: blend.base_t,
        blend_regions: blend.regions,
        blend_regions_shrunk: blend.regions_shrunk,
        noise_seed,
        noise_weight: cfg.noise_weight(severe),
        t_low: cfg.t_low,
        t_high: cfg.t_high,
        w_n: cfg.w_n,
        degenerate_input: normalized.degenerate,
    };
    let out = realize(&normalized.image, &record, bank)?;
    Ok((out, record))
}

/// Rebuilds the degraded image of `j` described by `record`.
pub fn replay(j: &Image, record: &AugRecord, bank: &LightBank) -> Result<Image> {
    realize(&minmax_normalize(j).image, record, bank)
}

fn realize(normalized: &Image, record: &AugRecord, bank: &LightBank) -> Result<Image> {
    let (h, w, c) = normalized.dims();
    if (record.height, record.width, record.channels) != (h, w, c) {
        return Err(Error::DimensionMismatch(format!(
            "record is for {}x{}x{}, image is {h}x{w}x{c}",
            record.height, record.width, record.channels
        )));
    }
    let light = record.light_source.render(h, w, c, bank)?;
    let light = apply_glows(&light, &record.glows)?;
    let blend = BlendMap::build(
        h,
        w,
        record.base_t,
        record.blend_regions.clone(),
        record.blend_regions_shrunk,
    )?;
    let mut noise_rng = RngStream::new(record.noise_seed, 0);
    let eps = truncated_noise(h, w, c, record.noise_weight, &mut noise_rng);
    compose(normalized, &blend, &light, &eps)
}
