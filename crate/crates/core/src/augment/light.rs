//! Atmospheric light maps and glow synthesis.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::image::{clamp_unit, list_images, load_image, resize_bilinear, Image};
use crate::rng::RngStream;

/// A collection of light-map images, ordered by file name.
#[derive(Debug, Clone, Default)]
pub struct LightBank {
    entries: Vec<(String, Image)>,
}

impl LightBank {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Loads every PNG/PPM in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let mut entries = Vec::new();
        for path in list_images(dir)? {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            entries.push((name, load_image(&path)?));
        }
        Ok(Self { entries })
    }

    pub fn from_images(entries: Vec<(String, Image)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, index: usize, name: &str) -> Result<&Image> {
        match self.entries.get(index) {
            Some((n, img)) if n == name => Ok(img),
            _ => Err(Error::InvalidConfig(format!(
                "light bank has no entry {index} named {name:?}"
            ))),
        }
    }
}

/// One cosine term of a procedural light field, in cycles per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub freq_y: f64,
    pub freq_x: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelField {
    pub base: f64,
    pub spread: f64,
    pub terms: Vec<CosineTerm>,
}

/// Smooth low-frequency colour field used when no light bank is available.
///
/// Each channel is `base + spread * sum(a_k cos(..)) / sum(a_k)`, which stays
/// inside `[base - spread, base + spread]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralField {
    pub channels: Vec<ChannelField>,
}

const PROCEDURAL_TERMS: usize = 3;

impl ProceduralField {
    pub fn sample(channels: usize, rng: &mut RngStream) -> Self {
        let channels = (0..channels)
            .map(|_| {
                let base = rng.uniform_range(0.15, 0.5);
                let spread = rng.uniform_range(0.02, 0.1);
                let terms = (0..PROCEDURAL_TERMS)
                    .map(|_| CosineTerm {
                        amplitude: rng.uniform_open_closed(),
                        freq_y: rng.uniform_range(0.0, 1.5),
                        freq_x: rng.uniform_range(0.0, 1.5),
                        phase: rng.uniform_range(0.0, 2.0 * PI),
                    })
                    .collect();
                ChannelField {
                    base,
                    spread,
                    terms,
                }
            })
            .collect();
        Self { channels }
    }

    pub fn render(&self, height: usize, width: usize) -> Result<Image> {
        let channels = self.channels.len();
        // cos(a + b) = cos a cos b - sin a sin b, with a along y and b along x
        let axis = |n: usize, f: &dyn Fn(f64) -> f64| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let a = f((i as f64 + 0.5) / n as f64);
                    (a.cos(), a.sin())
                })
                .collect()
        };
        let tables: Vec<Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)>> = self
            .channels
            .iter()
            .map(|field| {
                field
                    .terms
                    .iter()
                    .map(|t| {
                        (
                            axis(height, &|v| 2.0 * PI * t.freq_y * v + t.phase),
                            axis(width, &|u| 2.0 * PI * t.freq_x * u),
                        )
                    })
                    .collect()
            })
            .collect();
        Image::from_fn(height, width, channels, |y, x, c| {
            let field = &self.channels[c];
            let (sum, norm) = field.terms.iter().zip(&tables[c]).fold(
                (0.0, 0.0),
                |(s, n), (t, (ys, xs))| {
                    let ((cy, sy), (cx, sx)) = (ys[y], xs[x]);
                    (s + t.amplitude * (cy * cx - sy * sx), n + t.amplitude)
                },
            );
            let shape = if norm > 0.0 { sum / norm } else { 0.0 };
            field.base + field.spread * shape
        })
    }
}

/// Where a light map came from; enough to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LightSource {
    Bank { index: usize, name: String },
    Procedural { field: ProceduralField },
}

impl LightSource {
    pub fn id(&self) -> String {
        match self {
            LightSource::Bank { name, .. } => name.clone(),
            LightSource::Procedural { .. } => "procedural".to_string(),
        }
    }

    /// Renders the source at the requested size and channel count.
    pub fn render(
        &self,
        height: usize,
        width: usize,
        channels: usize,
        bank: &LightBank,
    ) -> Result<Image> {
        match self {
            LightSource::Bank { index, name } => {
                let img = bank.entry(*index, name)?.to_channels(channels)?;
                resize_bilinear(&img, height, width)
            }
            LightSource::Procedural { field } => {
                if field.channels.len() != channels {
                    return Err(Error::DimensionMismatch(format!(
                        "procedural field has {} channels, target has {channels}",
                        field.channels.len()
                    )));
                }
                field.render(height, width)
            }
        }
    }
}

/// Atmospheric light field `L` together with its origin.
#[derive(Debug, Clone)]
pub struct LightMap {
    pub image: Image,
    pub source: LightSource,
}

/// Picks a bank entry uniformly and resizes it to `dims`, or synthesizes a
/// procedural field when the bank is empty and `fallback` is set.
pub fn sample_light_map(
    bank: &LightBank,
    dims: (usize, usize, usize),
    rng: &mut RngStream,
    fallback: bool,
) -> Result<LightMap> {
    let source = sample_light_source(bank, dims.2, rng, fallback)?;
    let image = source.render(dims.0, dims.1, dims.2, bank)?;
    Ok(LightMap { image, source })
}

pub(crate) fn sample_light_source(
    bank: &LightBank,
    channels: usize,
    rng: &mut RngStream,
    fallback: bool,
) -> Result<LightSource> {
    if bank.is_empty() {
        if !fallback {
            return Err(Error::EmptyBank);
        }
        return Ok(LightSource::Procedural {
            field: ProceduralField::sample(channels, rng),
        });
    }
    let index = rng.int_inclusive(0, bank.len() - 1);
    Ok(LightSource::Bank {
        index,
        name: bank.entries[index].0.clone(),
    })
}

/// A single Gaussian glow bump. The kernel covers a `kernel x kernel`
/// window centred on `(center_y, center_x)` with standard deviation
/// `kernel / 4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlowSpot {
    pub center_y: usize,
    pub center_x: usize,
    pub kernel: usize,
    pub amplitude: f64,
}

impl GlowSpot {
    pub fn sigma(&self) -> f64 {
        self.kernel as f64 / 4.0
    }

    /// Bump value at integer offset `(dy, dx)` from the centre; zero outside
    /// the kernel window.
    pub fn value_at(&self, dy: i64, dx: i64) -> f64 {
        let half = (self.kernel / 2) as i64;
        if dy.abs() > half || dx.abs() > half {
            return 0.0;
        }
        let s = self.sigma();
        self.amplitude * (-((dy * dy + dx * dx) as f64) / (2.0 * s * s)).exp()
    }
}

/// Draws the glow spots for an image of `height x width`.
///
/// The draw sequence does not depend on `severe`; non-severe spots only have
/// their amplitude scaled afterwards.
pub fn sample_glows(
    height: usize,
    width: usize,
    rng: &mut RngStream,
    cfg: &AugConfig,
    severe: bool,
) -> Vec<GlowSpot> {
    let count = rng.int_inclusive(cfg.glow_regions[0], cfg.glow_regions[1]);
    let scale = if severe { 1.0 } else { cfg.non_severe_glow_scale };
    (0..count)
        .map(|_| {
            let kernel = rng.int_inclusive(cfg.glow_kernel[0], cfg.glow_kernel[1]);
            let center_y = rng.int_inclusive(0, height - 1);
            let center_x = rng.int_inclusive(0, width - 1);
            let amplitude = rng.uniform_open_closed() * scale;
            GlowSpot {
                center_y,
                center_x,
                kernel,
                amplitude,
            }
        })
        .collect()
}

/// Adds every spot to all channels equally, then saturates to `[0, 1]`.
/// Spots reaching past the image border are truncated.
pub fn apply_glows(image: &Image, spots: &[GlowSpot]) -> Result<Image> {
    if spots.is_empty() {
        return Ok(image.clone());
    }
    let (h, w, c) = image.dims();
    let mut boost = vec![0.0; h * w];
    for spot in spots {
        let half = spot.kernel / 2;
        let y0 = spot.center_y.saturating_sub(half);
        let y1 = (spot.center_y + half).min(h - 1);
        let x0 = spot.center_x.saturating_sub(half);
        let x1 = (spot.center_x + half).min(w - 1);
        for y in y0..=y1 {
            let dy = y as i64 - spot.center_y as i64;
            for x in x0..=x1 {
                let dx = x as i64 - spot.center_x as i64;
                boost[y * w + x] += spot.value_at(dy, dx);
            }
        }
    }
    let data = image
        .data()
        .chunks_exact(c)
        .zip(&boost)
        .flat_map(|(px, &b)| px.iter().map(move |&v| clamp_unit(v + b)))
        .collect();
    Image::new(h, w, c, data)
}

/// Samples glow spots and applies them to `lm`.
pub fn add_glow(
    lm: &LightMap,
    rng: &mut RngStream,
    cfg: &AugConfig,
    severe: bool,
) -> Result<(LightMap, Vec<GlowSpot>)> {
    let spots = sample_glows(lm.image.height(), lm.image.width(), rng, cfg, severe);
    let image = apply_glows(&lm.image, &spots)?;
    Ok((
        LightMap {
            image,
            source: lm.source.clone(),
        },
        spots,
    ))
}
