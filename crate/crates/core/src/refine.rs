//! Self-refinement on unlabeled hazy images.
//!
//! A teacher produces pseudo labels by averaging its predictions over
//! overlapping patches; pixels where the patches disagree are masked out. A
//! student learns to reproduce the pseudo labels from re-degraded inputs,
//! and each student update is kept only if a no-reference quality metric
//! says the outputs improved. Accepted updates flow into the teacher through
//! an exponential moving average.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugConfig, LightBank};
use crate::error::{Error, Result};
use crate::image::{ensure_same_dims, Image};
use crate::iqa::{score, MetricHandle};
use crate::loss::sign;
use crate::model::Restorer;
use crate::optim::{adam_step, AdamConfig, OptimState};
use crate::rng::RngStream;
use crate::train::ImageSet;

/// Stream id used to pick the held-out probe images.
const PROBE_STREAM: u64 = 0x9B0B;

/// Patches evaluated together before folding them into the running moments.
const ENSEMBLE_CHUNK: usize = 16;

/// Per-pixel ensemble mean and population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub mean: Image,
    pub variance: Vec<f64>,
}

/// 1 where the teacher is trusted, 0 elsewhere. Same layout as [`Image`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width * channels || values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidImage(format!(
                "mask needs {} values in {{0,1}}",
                height * width * channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn ones(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![1; height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        // reuse the image crop bounds checks
        let as_img = Image::new(
            self.height,
            self.width,
            self.channels,
            self.values.iter().map(|&v| v as f64).collect(),
        )?;
        let c = as_img.crop(top, left, height, width)?;
        Ok(Self {
            height,
            width,
            channels: self.channels,
            values: c.data().iter().map(|&v| v as u8).collect(),
        })
    }

    /// The mask as a 0/1 image, e.g. for dumping to PNG.
    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask values are 0 or 1")
    }
}

/// How the two metric terms of the gate are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `mean(IQA(new) - IQA(old))`: accept only improvements.
    #[default]
    Difference,
    /// `mean(IQA(new) + IQA(old))`, as the formula is printed.
    Sum,
}

/// Which images the gate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeMode {
    /// A fixed seeded subset of the unlabeled set, never trained on.
    HeldOut { count: usize },
    /// The images of the current batch.
    Current,
}

impl Default for ProbeMode {
    fn default() -> Self {
        ProbeMode::HeldOut { count: 4 }
    }
}

/// Serializes infinite thresholds as strings since JSON has no infinity.
mod ext_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Variance threshold for the confidence mask.
    pub v1_thr: f64,
    /// Gate threshold on the quality score.
    #[serde(with = "ext_float")]
    pub v2_thr: f64,
    pub ema_alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Degradation applied to the hazy image before the student sees it.
    pub student_aug: AugConfig,
    pub metric: MetricHandle,
    pub score_mode: ScoreMode,
    pub probe: ProbeMode,
    /// Run the gate every this many optimizer steps.
    pub gate_every: usize,
    /// Score the teacher on the probes after every accepted update.
    pub track_teacher: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RefineConfig {
    /// Full-scale schedule: 224 px patches at stride 4, thresholds 0.005
    /// and 0, EMA 0.9999, lr 2e-5, 10,000 steps of batch 16.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 224,
            stride: 4,
            v1_thr: 0.005,
            v2_thr: 0.0,
            ema_alpha: 0.9999,
            steps: 10_000,
            batch_size: 16,
            lr: 2e-5,
            adam: AdamConfig::default(),
            student_aug: AugConfig::non_severe(),
            metric: MetricHandle::Contrast,
            score_mode: ScoreMode::Difference,
            probe: ProbeMode::default(),
            gate_every: 1,
            track_teacher: false,
            seed: 0,
        }
    }

    /// Small patches and a short schedule for the linear restorer.
    pub fn toy() -> Self {
        Self {
            patch_size: 32,
            stride: 8,
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.stride == 0 {
            return bad("patch_size and stride must be positive".into());
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return bad(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha));
        }
        if !(self.v1_thr >= 0.0) {
            return bad(format!("v1_thr must be non-negative, got {}", self.v1_thr));
        }
        if self.v2_thr.is_nan() {
            return bad("v2_thr is NaN".into());
        }
        if self.batch_size == 0 || self.gate_every == 0 {
            return bad("batch_size and gate_every must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let ProbeMode::HeldOut { count: 0 } = self.probe {
            return bad("held-out probe set must not be empty".into());
        }
        self.student_aug.validate()
    }
}

/// Top-left offsets along one axis: multiples of `stride`, plus a final
/// offset flush with the border when the stride does not land there.
///
/// A stride longer than the patch would leave gaps, so the step is capped
/// at `patch`.
pub fn tile_positions(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidConfig("patch and stride must be positive".into()));
    }
    if patch > len {
        return Err(Error::InvalidConfig(format!(
            "patch {patch} exceeds image extent {len}"
        )));
    }
    let last = len - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride.min(patch)).collect();
    if *out.last().expect("0 is always a position") != last {
        out.push(last);
    }
    Ok(out)
}

/// All `(top, left)` patch offsets, row-major.
pub fn tile_grid(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    let ys = tile_positions(height, patch, stride)?;
    let xs = tile_positions(width, patch, stride)?;
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect())
}

/// Running per-pixel moments (Welford).
struct Moments {
    height: usize,
    width: usize,
    channels: usize,
    count: Vec<u32>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(height: usize, width: usize, channels: usize) -> Self {
        let n = height * width * channels;
        Self {
            height,
            width,
            channels,
            count: vec![0; height * width],
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    fn add(&mut self, top: usize, left: usize, patch: &Image) -> Result<()> {
        let (ph, pw, pc) = patch.dims();
        if pc != self.channels || top + ph > self.height || left + pw > self.width {
            return Err(Error::DimensionMismatch(format!(
                "patch {ph}x{pw}x{pc} at ({top},{left}) does not fit {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        let c = self.channels;
        for y in 0..ph {
            for x in 0..pw {
                let p = (top + y) * self.width + left + x;
                self.count[p] += 1;
                let n = self.count[p] as f64;
                for ch in 0..c {
                    let v = patch.get(y, x, ch);
                    let i = p * c + ch;
                    let d = v - self.mean[i];
                    self.mean[i] += d / n;
                    self.m2[i] += d * (v - self.mean[i]);
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<ConfidenceMap> {
        if let Some(p) = self.count.iter().position(|&n| n == 0) {
            return Err(Error::InvalidConfig(format!(
                "pixel ({}, {}) is not covered by any patch",
                p / self.width,
                p % self.width
            )));
        }
        let c = self.channels;
        let variance = self
            .m2
            .iter()
            .enumerate()
            .map(|(i, m2)| (m2 / self.count[i / c] as f64).max(0.0))
            .collect();
        Ok(ConfidenceMap {
            mean: Image::from_clamped(self.height, self.width, c, self.mean)?,
            variance,
        })
    }
}

/// Folds patch predictions `(top, left, patch)` into mean and variance maps.
pub fn ensemble_from_patches<'a>(
    height: usize,
    width: usize,
    channels: usize,
    patches: impl IntoIterator<Item = (usize, usize, &'a Image)>,
) -> Result<ConfidenceMap> {
    let mut acc = Moments::new(height, width, channels);
    for (top, left, p) in patches {
        acc.add(top, left, p)?;
    }
    acc.finish()
}

/// Runs `teacher` on every overlapping patch of `image`.
///
/// Patches are evaluated in parallel but folded in grid order, so the result
/// does not depend on scheduling.
pub fn ensemble_predict<R: Restorer + ?Sized>(
    teacher: &R,
    image: &Image,
    patch: usize,
    stride: usize,
) -> Result<ConfidenceMap> {
    let (h, w, c) = image.dims();
    let grid = tile_grid(h, w, patch, stride)?;
    let mut acc = Moments::new(h, w, c);
    for chunk in grid.chunks(ENSEMBLE_CHUNK) {
        let outs: Vec<Image> = chunk
            .par_iter()
            .map(|&(y, x)| teacher.forward(&image.crop(y, x, patch, patch)?))
            .collect::<Result<_>>()?;
        for (&(y, x), out) in chunk.iter().zip(&outs) {
            acc.add(y, x, out)?;
        }
    }
    acc.finish()
}

/// 1 where the ensemble variance is at most `v1_thr`.
pub fn confidence_mask(conf: &ConfidenceMap, v1_thr: f64) -> Result<BinaryMask> {
    if !(v1_thr >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "v1_thr must be non-negative, got {v1_thr}"
        )));
    }
    let (h, w, c) = conf.mean.dims();
    Ok(BinaryMask {
        height: h,
        width: w,
        channels: c,
        values: conf.variance.iter().map(|&v| (v <= v1_thr) as u8).collect(),
    })
}

fn check_mask(pred: &Image, target: &Image, mask: &BinaryMask) -> Result<()> {
    ensure_same_dims(pred, target)?;
    if mask.dims() != pred.dims() {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.dims(),
            pred.dims()
        )));
    }
    Ok(())
}

/// Batch mean of the per-image masked mean absolute error.
pub fn masked_l1(preds: &[Image], targets: &[Image], masks: &[BinaryMask]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions, {} targets, {} masks",
            preds.len(),
            targets.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        check_mask(p, t, m)?;
        total += masked_l1_terms(p.data(), t.data(), m.values()).0;
    }
    Ok(total / preds.len() as f64)
}

/// Masked mean absolute error of one sample and its derivative w.r.t. `pred`.
fn masked_l1_terms(pred: &[f64], target: &[f64], mask: &[u8]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), &m)| {
            if m == 0 {
                return 0.0;
            }
            loss += (p - t).abs();
            sign(p - t) / n
        })
        .collect();
    (loss / n, grad)
}

/// `alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch(format!(
            "teacher has {} params, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
        .collect())
}

/// Outcome of one gate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub accepted: bool,
    /// `None` when the metric failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Mean of the old and new model scores over the probes, combined as `mode`.
pub fn gate_score<R: Restorer + ?Sized>(
    metric: &MetricHandle,
    old: &R,
    new: &R,
    probes: &[Image],
    mode: ScoreMode,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidConfig("gate needs at least one probe".into()));
    }
    let mut total = 0.0;
    for p in probes {
        let a = score(metric, &new.forward(p)?)?;
        let b = score(metric, &old.forward(p)?)?;
        total += match mode {
            ScoreMode::Difference => a - b,
            ScoreMode::Sum => a + b,
        };
    }
    Ok(total / probes.len() as f64)
}

/// Accepts iff the score exceeds `v2_thr`. Metric failures reject.
pub fn iqa_gate<R: Restorer + ?Sized>(
    metric: &MetricHandle,
    old: &R,
    new: &R,
    probes: &[Image],
    v2_thr: f64,
    mode: ScoreMode,
) -> Result<GateDecision> {
    match gate_score(metric, old, new, probes, mode) {
        Ok(s) => Ok(GateDecision {
            accepted: s > v2_thr,
            score: Some(s),
            error: None,
        }),
        Err(Error::Metric(e)) => Ok(GateDecision {
            accepted: false,
            score: None,
            error: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Teacher, student and the student's optimizer.
#[derive(Debug, Clone)]
pub struct TeacherStudentState<R> {
    pub teacher: R,
    pub student: R,
    pub optim: OptimState,
    pub accepted: usize,
    pub rejected: usize,
}

impl<R: Restorer + Clone> TeacherStudentState<R> {
    /// Teacher and student both start from `init`.
    pub fn new(init: R) -> Self {
        let optim = OptimState::new(init.num_params());
        Self {
            teacher: init.clone(),
            student: init,
            optim,
            accepted: 0,
            rejected: 0,
        }
    }
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: usize,
    /// Names of the batch images, comma separated.
    pub image_id: String,
    pub loss: f64,
    pub score: Option<f64>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineReport {
    pub audit: Vec<AuditRecord>,
    /// Held-out probe image names (empty in current-batch mode).
    pub probe_ids: Vec<String>,
}

impl RefineReport {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.audit {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn accepted(&self) -> usize {
        self.audit.iter().filter(|r| r.accepted).count()
    }
}

fn center_crop(img: &Image, size: usize) -> Result<Image> {
    let ch = size.min(img.height());
    let cw = size.min(img.width());
    img.crop((img.height() - ch) / 2, (img.width() - cw) / 2, ch, cw)
}

/// Splits image indices into (training pool, probes).
fn split_probes(n: usize, probe: ProbeMode, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    match probe {
        ProbeMode::Current => Ok(((0..n).collect(), Vec::new())),
        ProbeMode::HeldOut { count } => {
            if count >= n {
                return Err(Error::InvalidConfig(format!(
                    "{count} probe images leave nothing to train on ({n} images)"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = RngStream::new(seed, PROBE_STREAM);
            for i in 0..count {
                let j = rng.int_inclusive(i, n - 1);
                idx.swap(i, j);
            }
            let mut probes = idx[..count].to_vec();
            probes.sort_unstable();
            let pool = (0..n).filter(|i| !probes.contains(i)).collect();
            Ok((pool, probes))
        }
    }
}

struct Sample {
    image: usize,
    loss: f64,
    grad: Vec<f64>,
}

/// Runs the refinement loop, updating `state` in place.
///
/// Every optimizer step produces one audit record. When the gate rejects,
/// the student and its optimizer state are restored to the last accepted
/// values and the teacher is left alone.
pub fn refine_loop<R: Restorer + Clone>(
    state: &mut TeacherStudentState<R>,
    unlabeled: &ImageSet,
    bank: &LightBank,
    cfg: &RefineConfig,
) -> Result<RefineReport> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::InvalidConfig("no unlabeled images".into()));
    }
    if state.teacher.num_params() != state.student.num_params()
        || state.optim.m.len() != state.student.num_params()
    {
        return Err(Error::DimensionMismatch(
            "teacher, student and optimizer sizes differ".into(),
        ));
    }
    let images = &unlabeled.images;
    for img in images {
        tile_positions(img.height(), cfg.patch_size, cfg.stride)?;
        tile_positions(img.width(), cfg.patch_size, cfg.stride)?;
    }
    let (pool, probe_idx) = split_probes(images.len(), cfg.probe, cfg.seed)?;
    let held_out: Vec<Image> = probe_idx
        .iter()
        .map(|&i| center_crop(&images[i], cfg.patch_size))
        .collect::<Result<_>>()?;

    let base = RngStream::new(cfg.seed, 0);
    let batch = cfg.batch_size;
    // pseudo labels only change when the teacher does
    let mut teacher_version = 0usize;
    let mut labels: HashMap<usize, (usize, Image, BinaryMask)> = HashMap::new();
    let mut committed = state.student.clone();
    let mut committed_optim = state.optim.clone();
    let mut pending: Vec<AuditRecord> = Vec::new();
    let mut report = RefineReport {
        audit: Vec::with_capacity(cfg.steps),
        probe_ids: probe_idx.iter().map(|&i| unlabeled.names[i].clone()).collect(),
    };
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..batch)
            .map(|b| {
                let mut rng = base.child((step * batch + b) as u64);
                pool[rng.int_inclusive(0, pool.len() - 1)]
            })
            .collect();
        for &i in &picks {
            let stale = labels.get(&i).is_none_or(|(v, _, _)| *v != teacher_version);
            if stale {
                let conf = ensemble_predict(&state.teacher, &images[i], cfg.patch_size, cfg.stride)?;
                let mask = confidence_mask(&conf, cfg.v1_thr)?;
                labels.insert(i, (teacher_version, conf.mean, mask));
            }
        }

        let student = &state.student;
        let samples: Vec<Sample> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = base.child((step * batch + b) as u64);
                let i = pool[rng.int_inclusive(0, pool.len() - 1)];
                let x = &images[i];
                let (_, pseudo, mask) = &labels[&i];
                let (degraded, _) = augment(x, &cfg.student_aug, &mut rng, bank)?;
                let ch = cfg.patch_size.min(x.height());
                let cw = cfg.patch_size.min(x.width());
                let top = rng.int_inclusive(0, x.height() - ch);
                let left = rng.int_inclusive(0, x.width() - cw);
                let input = degraded.crop(top, left, ch, cw)?;
                let target = pseudo.crop(top, left, ch, cw)?;
                let m = mask.crop(top, left, ch, cw)?;
                let raw = student.forward_raw(&input)?;
                let (loss, grad_out) = masked_l1_terms(&raw, target.data(), m.values());
                let grad = student.backward(&input, &grad_out)?;
                Ok(Sample { image: i, loss, grad })
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch as f64;
        let mut grad = vec![0.0; student.num_params()];
        let mut loss = 0.0;
        for s in &samples {
            loss += s.loss;
            grad.iter_mut().zip(&s.grad).for_each(|(a, b)| *a += b);
        }
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                trace: losses,
            });
        }
        let mut params = state.student.params().to_vec();
        adam_step(&mut params, &grad, &mut state.optim, cfg.lr, &cfg.adam)?;
        state.student.set_params(&params)?;

        let image_id = samples
            .iter()
            .map(|s| unlabeled.names[s.image].as_str())
            .collect::<Vec<_>>()
            .join(",");
        pending.push(AuditRecord {
            step,
            image_id,
            loss,
            score: None,
            accepted: false,
            error: None,
            teacher_score: None,
        });

        let gate_now = (step + 1) % cfg.gate_every == 0 || step + 1 == cfg.steps;
        if !gate_now {
            continue;
        }
        let current: Vec<Image>;
        let probes = match cfg.probe {
            ProbeMode::HeldOut { .. } => &held_out,
            ProbeMode::Current => {
                current = picks
                    .iter()
                    .map(|&i| center_crop(&images[i], cfg.patch_size))
                    .collect::<Result<_>>()?;
                &current
            }
        };
        let decision = iqa_gate(
            &cfg.metric,
            &committed,
            &state.student,
            probes,
            cfg.v2_thr,
            cfg.score_mode,
        )?;
        let mut teacher_score = None;
        if decision.accepted {
            let t = ema_update(state.teacher.params(), state.student.params(), cfg.ema_alpha)?;
            state.teacher.set_params(&t)?;
            teacher_version += 1;
            committed = state.student.clone();
            committed_optim = state.optim.clone();
            state.accepted += pending.len();
            if cfg.track_teacher {
                let mut total = 0.0;
                for p in probes {
                    total += score(&cfg.metric, &state.teacher.forward(p)?)?;
                }
                teacher_score = Some(total / probes.len() as f64);
            }
        } else {
            state.student.set_params(committed.params())?;
            state.optim = committed_optim.clone();
            state.rejected += pending.len();
        }
        for mut r in pending.drain(..) {
            r.score = decision.score;
            r.accepted = decision.accepted;
            r.error = decision.error.clone();
            r.teacher_score = teacher_score;
            report.audit.push(r);
        }
    }
    Ok(report)
}
