//! Restorer interface, the built-in linear neighbourhood restorer, and the
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "NPRCKPT\0"
//! version      u32      1
//! desc_len     u32
//! descriptor   desc_len bytes, UTF-8
//! param_count  u64
//! params       param_count x f64
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NPRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter-vector-backed image restorer.
///
/// `forward` must be a deterministic function of the parameters and the
/// input, and `set_params(params())` must round-trip bit-exactly.
pub trait Restorer: Send + Sync {
    /// Architecture descriptor stored in checkpoints.
    fn descriptor(&self) -> String;

    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Unclamped response, laid out like `input`. Training losses are taken
    /// on this response so that the output clamp never blocks gradients.
    fn forward_raw(&self, input: &Image) -> Result<Vec<f64>>;

    /// Gradient w.r.t. the parameters of `sum_i grad_output[i] * forward_raw(input)[i]`.
    fn backward(&self, input: &Image, grad_output: &[f64]) -> Result<Vec<f64>>;

    /// Restored image, same dimensions as `input`, clamped to `[0, 1]`.
    fn forward(&self, input: &Image) -> Result<Image> {
        let (h, w, c) = input.dims();
        Image::from_clamped(h, w, c, self.forward_raw(input)?)
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// Per-channel affine filter over a `(2r+1) x (2r+1)` neighbourhood with
/// edge replication at the borders.
///
/// Parameters are laid out channel by channel: the taps in row-major order
/// followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPatchRestorer {
    radius: usize,
    channels: usize,
    params: Vec<f64>,
}

impl LinearPatchRestorer {
    pub fn taps(radius: usize) -> usize {
        (2 * radius + 1) * (2 * radius + 1)
    }

    pub fn param_count(radius: usize, channels: usize) -> usize {
        channels * (Self::taps(radius) + 1)
    }

    /// Centre tap 1, everything else 0: the identity map.
    pub fn identity(radius: usize, channels: usize) -> Self {
        let mut params = vec![0.0; Self::param_count(radius, channels)];
        let stride = Self::taps(radius) + 1;
        let centre = radius * (2 * radius + 1) + radius;
        for c in 0..channels {
            params[c * stride + centre] = 1.0;
        }
        Self {
            radius,
            channels,
            params,
        }
    }

    pub fn zeros(radius: usize, channels: usize) -> Self {
        Self {
            radius,
            channels,
            params: vec![0.0; Self::param_count(radius, channels)],
        }
    }

    pub fn with_params(radius: usize, channels: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(radius, channels);
        m.set_params(&params)?;
        Ok(m)
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parses descriptors of the form `linear-patch/r=2/c=3`.
    pub fn parse_descriptor(desc: &str) -> Result<(usize, usize)> {
        let bad = || Error::Checkpoint(format!("unknown architecture descriptor {desc:?}"));
        let mut parts = desc.split('/');
        if parts.next() != Some("linear-patch") {
            return Err(bad());
        }
        let mut field = |key: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let r = field("r=")?;
        let c = field("c=")?;
        if c != 1 && c != 3 {
            return Err(bad());
        }
        Ok((r, c))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (r, c) = Self::parse_descriptor(&ckpt.descriptor)?;
        Self::with_params(r, c, ckpt.params.clone())
    }

    fn check_input(&self, input: &Image) -> Result<()> {
        if input.channels() != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} channels, input has {}",
                self.channels,
                input.channels()
            )));
        }
        Ok(())
    }

    /// Edge-replicated planes, one per channel, padded by `radius` on every side.
    fn padded_planes(&self, input: &Image) -> Vec<Vec<f64>> {
        let (h, w, c) = input.dims();
        let r = self.radius;
        let pw = w + 2 * r;
        (0..c)
            .map(|ch| {
                let mut plane = Vec::with_capacity((h + 2 * r) * pw);
                for py in 0..h + 2 * r {
                    let y = py.saturating_sub(r).min(h - 1);
                    for px in 0..pw {
                        let x = px.saturating_sub(r).min(w - 1);
                        plane.push(input.get(y, x, ch));
                    }
                }
                plane
            })
            .collect()
    }

    /// Unclamped filter response, laid out like the input image.
    pub fn raw_response(&self, input: &Image) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let (h, w, c) = input.dims();
        let k = 2 * self.radius + 1;
        let pw = w + 2 * self.radius;
        let stride = Self::taps(self.radius) + 1;
        let planes = self.padded_planes(input);
        let mut out = vec![0.0; h * w * c];
        for (ch, plane) in planes.iter().enumerate() {
            let weights = &self.params[ch * stride..(ch + 1) * stride];
            let bias = weights[stride - 1];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias;
                    for dy in 0..k {
                        let row = &plane[(y + dy) * pw + x..(y + dy) * pw + x + k];
                        let wrow = &weights[dy * k..(dy + 1) * k];
                        acc += row.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        Ok(out)
    }
}

impl Restorer for LinearPatchRestorer {
    fn descriptor(&self) -> String {
        format!("linear-patch/r={}/c={}", self.radius, self.channels)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} expects {} parameters, got {}",
                self.descriptor(),
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn forward_raw(&self, input: &Image) -> Result<Vec<f64>> {
        self.raw_response(input)
    }

    fn backward(&self, input: &Image, grad_output: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if grad_output.len() != input.len() {
            return Err(Error::DimensionMismatch(format!(
                "output gradient has {} entries, image has {}",
                grad_output.len(),
                input.len()
            )));
        }
        let (h, w, c) = input.dims();
        let k = 2 * self.radius + 1;
        let pw = w + 2 * self.radius;
        let stride = Self::taps(self.radius) + 1;
        let planes = self.padded_planes(input);
        let mut grad = vec![0.0; self.params.len()];
        for (ch, plane) in planes.iter().enumerate() {
            let g = &mut grad[ch * stride..(ch + 1) * stride];
            for y in 0..h {
                for x in 0..w {
                    let go = grad_output[(y * w + x) * c + ch];
                    if go == 0.0 {
                        continue;
                    }
                    for dy in 0..k {
                        let row = &plane[(y + dy) * pw + x..(y + dy) * pw + x + k];
                        for (gw, v) in g[dy * k..(dy + 1) * k].iter_mut().zip(row) {
                            *gw += go * v;
                        }
                    }
                    g[stride - 1] += go;
                }
            }
        }
        Ok(grad)
    }
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn of(model: &dyn Restorer) -> Self {
        Self {
            descriptor: model.descriptor(),
            params: model.params().to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = self.descriptor.as_bytes();
        let mut out = Vec::with_capacity(24 + desc.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(err("truncated checkpoint"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let desc_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let descriptor = std::str::from_utf8(take(desc_len)?)
            .map_err(|_| err("descriptor is not UTF-8"))?
            .to_string();
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let body = take(count.checked_mul(8).ok_or_else(|| err("parameter count overflow"))?)?;
        let params = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if !cursor.is_empty() {
            return Err(err("trailing bytes after parameters"));
        }
        Ok(Self { descriptor, params })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes via a temporary sibling file and rename, so a failed write
    /// never leaves a partial checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }
}
