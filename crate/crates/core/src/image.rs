//! Pixel container and the handful of whole-image operations the rest of
//! the crate builds on.
//!
//! Images are stored row-major with interleaved channels (`HxWxC`) as `f64`
//! intensities in `[0, 1]`. Every public constructor either validates or
//! clamps, so downstream code may assume the range invariant.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageError, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_shape(height: usize, width: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be positive, got {height}x{width}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidImage(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    Ok(())
}

impl Image {
    /// Builds an image from raw data, rejecting anything outside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "value {} at index {i} lies outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, saturating every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        check_shape(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::from_clamped(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds an image by evaluating `f(y, x, c)`; results are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_shape(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    /// Copies out the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        check_shape(height, width, self.channels)?;
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Image {
            height,
            width,
            channels: c,
            data,
        })
    }

    /// Converts between 1 and 3 channels (luma for 3 -> 1, replication for 1 -> 3).
    pub fn to_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => Ok(to_grayscale(self)),
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                Ok(Image {
                    height: self.height,
                    width: self.width,
                    channels: 3,
                    data,
                })
            }
            (_, b) => Err(Error::InvalidImage(format!(
                "cannot convert to {b} channels"
            ))),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        ensure_same_dims(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn ensure_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Reads an 8-bit PNG or binary PPM/PGM. Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("{format:?}"),
        });
    }
    let decoded = ImageReader::with_format(std::io::Cursor::new(bytes), format)
        .decode()
        .map_err(|e| match e {
            ImageError::Unsupported(u) => Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: u.to_string(),
            },
            other => Error::CorruptImage {
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        })?;
    Ok(from_dynamic(&decoded))
}

fn from_dynamic(img: &DynamicImage) -> Image {
    let (height, width) = (img.height() as usize, img.width() as usize);
    let gray = !img.color().has_color();
    let (channels, raw) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let data = raw.into_iter().map(|b| f64::from(b) / 255.0).collect();
    Image {
        height,
        width,
        channels,
        data,
    }
}

/// Quantizes to 8 bits (round to nearest) and writes a PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = if img.channels == 1 {
        DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, bytes).expect("buffer length matches dims"),
        )
    } else {
        DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, bytes).expect("buffer length matches dims"),
        )
    };
    dynamic
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| match e {
            ImageError::IoError(io) => Error::io(path, io),
            other => Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(other.to_string()),
            },
        })
}

#[inline]
fn quantize(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Lists PNG/PPM/PGM files in `dir`, sorted lexicographically by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

/// Output of [`minmax_normalize`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub image: Image,
    /// Set when the input was constant; `image` is then all zeros.
    pub degenerate: bool,
}

/// Joint-channel min-max normalization: `(x - min) / (max - min)`.
pub fn minmax_normalize(img: &Image) -> Normalized {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return Normalized {
            image: Image {
                data: vec![0.0; img.data.len()],
                ..img.clone()
            },
            degenerate: true,
        };
    }
    let data = img
        .data
        .iter()
        .map(|&v| clamp_unit((v - lo) / range))
        .collect();
    Normalized {
        image: Image {
            data,
            ..img.clone()
        },
        degenerate: false,
    }
}

/// Luma `0.299 R + 0.587 G + 0.114 B`; single-channel input is returned as is.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            clamp_unit(LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
        })
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// RMS contrast: population standard deviation of luma on the 0-255 scale.
pub fn rms_contrast(img: &Image) -> f64 {
    let gray = to_grayscale(img);
    let n = gray.data.len() as f64;
    // shifted by the first sample so constant images give exactly zero
    let shift = gray.data[0];
    let (sum, sum_sq) = gray.data.iter().fold((0.0, 0.0), |(s, q), v| {
        let d = v - shift;
        (s + d, q + d * d)
    });
    let var = ((sum_sq - sum * sum / n) / n).max(0.0);
    var.sqrt() * 255.0
}

/// Bilinear resize with half-pixel centres and edge clamping.
///
/// Resizing to the same size is an exact copy.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    check_shape(height, width, img.channels)?;
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let c = img.channels;
    let mut data = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, img.width);
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push(clamp_unit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Ok(Image {
        height,
        width,
        channels: c,
        data,
    })
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    ensure_same_dims(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gray(values: &[f64]) -> Image {
        Image::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn constructor_rejects_out_of_range_and_bad_shapes() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
        let c = Image::from_clamped(1, 3, 1, vec![-1.0, 2.0, f64::NAN]).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn minmax_two_point_and_three_point() {
        assert_eq!(minmax_normalize(&gray(&[0.2, 0.6])).image.data(), &[0.0, 1.0]);
        let n = minmax_normalize(&gray(&[0.25, 0.5, 0.75])).image;
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn minmax_identity_on_spanning_image() {
        let img = gray(&[0.0, 0.3, 1.0, 0.7]);
        let n = minmax_normalize(&img);
        assert!(!n.degenerate);
        assert_eq!(n.image, img);
    }

    #[test]
    fn minmax_constant_is_flagged() {
        let n = minmax_normalize(&gray(&[0.4, 0.4, 0.4]));
        assert!(n.degenerate);
        assert!(n.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_is_joint_over_channels() {
        let img = Image::new(1, 2, 3, vec![0.2, 0.4, 0.6, 0.3, 0.5, 0.6]).unwrap();
        let n = minmax_normalize(&img).image;
        assert_abs_diff_eq!(n.get(0, 0, 0), 0.0);
        assert_abs_diff_eq!(n.get(0, 0, 1), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(n.get(0, 1, 2), 1.0);
    }

    #[test]
    fn grayscale_weights() {
        let white = Image::filled(1, 1, 3, 1.0).unwrap();
        assert_abs_diff_eq!(to_grayscale(&white).get(0, 0, 0), 1.0, epsilon = 1e-12);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(to_grayscale(&red).get(0, 0, 0), 0.299, epsilon = 1e-15);
        let g = gray(&[0.1, 0.9]);
        assert_eq!(to_grayscale(&g), g);
    }

    #[test]
    fn contrast_examples() {
        assert_eq!(rms_contrast(&Image::filled(4, 4, 3, 0.3).unwrap()), 0.0);
        let half = gray(&[0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(rms_contrast(&half), 127.5, epsilon = 1e-9);

        let ramp: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        // brute-force population std of 0..=255
        let mean = (0..256).map(f64::from).sum::<f64>() / 256.0;
        let expected = ((0..256).map(|i| (f64::from(i) - mean).powi(2)).sum::<f64>() / 256.0).sqrt();
        assert_abs_diff_eq!(expected, 73.9, epsilon = 0.01);
        assert_abs_diff_eq!(rms_contrast(&gray(&ramp)), expected, epsilon = 1e-9);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y * 8 + x) * 3 + c) as f64 / 200.0).unwrap();
        assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);
        let flat = Image::filled(5, 7, 1, 0.3).unwrap();
        let up = resize_bilinear(&flat, 16, 16).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn crop_and_channel_conversion() {
        let img = Image::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64 / 15.0).unwrap();
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(1, 2, 0));
        assert_eq!(c.get(1, 1, 0), img.get(2, 3, 0));
        assert!(img.crop(3, 3, 2, 2).is_err());
        let rgb = img.to_channels(3).unwrap();
        assert_eq!(rgb.get(2, 1, 2), img.get(2, 1, 0));
        assert_eq!(rgb.to_channels(1).unwrap().dims(), (4, 4, 1));
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = gray(&[0.1, 0.2]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = gray(&[0.2, 0.3]);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }
}
