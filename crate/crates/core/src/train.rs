//! Self-prior learning: restore severely degraded crops of clear images.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugConfig, LightBank};
use crate::error::{Error, Result};
use crate::image::{list_images, load_image, minmax_normalize, Image};
use crate::loss::{loss_gradient, reconstruction_loss, LossKind};
use crate::model::Restorer;
use crate::optim::{adam_step, AdamConfig, OptimState};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Desk-scale settings for the linear restorer.
    pub fn toy() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr: 1e-3,
            adam: AdamConfig::default(),
            loss: LossKind::Mse,
            crop_size: 64,
            seed: 0,
        }
    }

    /// Full-scale self-prior schedule: 20,000 steps of batch 128 on 224x224
    /// crops with learning rate 1.5e-4.
    pub fn full_scale() -> Self {
        Self {
            steps: 20_000,
            batch_size: 128,
            lr: 1.5e-4,
            crop_size: 224,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.crop_size == 0 {
            return Err(Error::InvalidConfig("crop_size must be positive".into()));
        }
        Ok(())
    }
}

/// Named clear images, all converted to the same channel count.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub names: Vec<String>,
    pub images: Vec<Image>,
}

impl ImageSet {
    /// Loads every image in `dir` (lexicographic order) as `channels` channels.
    pub fn load(dir: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for path in list_images(dir)? {
            set.names.push(
                path.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            set.images.push(load_image(&path)?.to_channels(channels)?);
        }
        if set.images.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(set)
    }

    pub fn from_images(images: Vec<Image>) -> Self {
        let names = (0..images.len()).map(|i| format!("image_{i:05}")).collect();
        Self { names, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A uniformly placed crop of at most `size x size`.
pub fn random_crop(img: &Image, size: usize, rng: &mut RngStream) -> Result<Image> {
    let ch = size.min(img.height());
    let cw = size.min(img.width());
    let top = rng.int_inclusive(0, img.height() - ch);
    let left = rng.int_inclusive(0, img.width() - cw);
    img.crop(top, left, ch, cw)
}

/// Draws one `(degraded, clear)` training pair: pick an image, crop it,
/// degrade the crop. The target is the min-max normalized crop.
pub fn sample_pair(
    images: &[Image],
    aug: &AugConfig,
    bank: &LightBank,
    crop_size: usize,
    rng: &mut RngStream,
) -> Result<(Image, Image)> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("no clear images to sample from".into()));
    }
    let idx = rng.int_inclusive(0, images.len() - 1);
    let crop = random_crop(&images[idx], crop_size, rng)?;
    let (degraded, _) = augment(&crop, aug, rng, bank)?;
    Ok((degraded, minmax_normalize(&crop).image))
}

/// Per-step mean batch loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// `step,loss` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn mean_range(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.losses[range];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Runs the self-prior loop in place on `model`.
///
/// Batch items are generated and differentiated in parallel; gradients are
/// summed in item order so results are independent of thread scheduling.
pub fn train_prior<R: Restorer>(
    images: &[Image],
    aug: &AugConfig,
    bank: &LightBank,
    cfg: &TrainConfig,
    model: &mut R,
) -> Result<LossTrace> {
    cfg.validate()?;
    aug.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let base = RngStream::new(cfg.seed, 0);
    let mut state = OptimState::new(model.num_params());
    let mut trace = LossTrace::default();
    let batch = cfg.batch_size;
    for step in 0..cfg.steps {
        let items: Vec<Result<(f64, Vec<f64>)>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = base.child((step * batch + b) as u64);
                let (input, target) = sample_pair(images, aug, bank, cfg.crop_size, &mut rng)?;
                loss_gradient(&*model, &input, &target, cfg.loss)
            })
            .collect();
        let mut grad = vec![0.0; model.num_params()];
        let mut loss = 0.0;
        for item in items {
            let (l, g) = item?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch as f64;
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        trace.losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                trace: trace.losses,
            });
        }
        let mut params = model.params().to_vec();
        adam_step(&mut params, &grad, &mut state, cfg.lr, &cfg.adam)?;
        model.set_params(&params)?;
    }
    Ok(trace)
}

/// Mean reconstruction loss of `model` over `(input, target)` pairs.
pub fn evaluate<R: Restorer + ?Sized>(
    model: &R,
    pairs: &[(Image, Image)],
    kind: LossKind,
) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|(input, target)| reconstruction_loss(&model.forward(input)?, target, kind))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearPatchRestorer;
    use crate::synth::night_scenes;

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            crop_size: 32,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn zero_steps_leaves_model() {
        let images = night_scenes(2, 32, 32, 3, 0).unwrap();
        let mut m = LinearPatchRestorer::identity(1, 3);
        let trace = train_prior(&images, &AugConfig::default(), &LightBank::empty(), &small_cfg(0), &mut m)
            .unwrap();
        assert!(trace.losses.is_empty());
        assert_eq!(m, LinearPatchRestorer::identity(1, 3));
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let images = night_scenes(3, 40, 40, 3, 1).unwrap();
        let run = || {
            let mut m = LinearPatchRestorer::identity(1, 3);
            let t = train_prior(&images, &AugConfig::default(), &LightBank::empty(), &small_cfg(15), &mut m)
                .unwrap();
            (t, m)
        };
        let (t1, m1) = run();
        let (t2, m2) = run();
        assert_eq!(t1, t2);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn empty_set_and_bad_config_error() {
        let mut m = LinearPatchRestorer::identity(1, 3);
        assert!(train_prior(&[], &AugConfig::default(), &LightBank::empty(), &small_cfg(1), &mut m).is_err());
        let images = night_scenes(1, 16, 16, 3, 0).unwrap();
        let bad = TrainConfig {
            lr: 0.0,
            ..small_cfg(1)
        };
        assert!(train_prior(&images, &AugConfig::default(), &LightBank::empty(), &bad, &mut m).is_err());
    }

    #[test]
    fn crops_never_exceed_image() {
        let img = Image::zeros(10, 20, 1).unwrap();
        let mut rng = RngStream::new(0, 0);
        for _ in 0..50 {
            assert_eq!(random_crop(&img, 16, &mut rng).unwrap().dims(), (10, 16, 1));
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = LossTrace {
            losses: vec![0.5, 0.25],
        };
        assert_eq!(t.to_csv(), "step,loss\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn full_scale_values() {
        let p = TrainConfig::full_scale();
        assert_eq!((p.steps, p.batch_size, p.crop_size), (20_000, 128, 224));
        assert_eq!(p.lr, 1.5e-4);
    }
}
