use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nightprior::augment::{augment, replay, AugRecord, LightBank};
use nightprior::image::{list_images, load_image, minmax_normalize, rms_contrast, save_image, Image};
use nightprior::iqa::{score_directory, MetricHandle};
use nightprior::model::{Checkpoint, LinearPatchRestorer, Restorer};
use nightprior::refine::{ensemble_predict, refine_loop, tile_grid, ProbeMode, TeacherStudentState};
use nightprior::synth::night_scenes;
use nightprior::train::{train_prior, ImageSet};
use nightprior::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

mod config;
mod manifest;

use config::RunConfig;
use manifest::RunManifest;

/// Failure classes, mapped to exit codes 1, 2 and 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<nightprior::Error> for CliError {
    fn from(e: nightprior::Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "nightprior", version, about = "Nighttime dehazing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with `augment`, `train` and `refine` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: toy, paper-prior or paper-refine.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref())
    }

    fn stamp(&self, m: &mut RunManifest) {
        m.config_path = self.config.as_ref().map(|p| p.display().to_string());
        m.preset = self.preset.clone();
    }
}

#[derive(Subcommand)]
enum Command {
    /// Degrade clear images and write (augmented, clear) pairs.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of pairs; defaults to one per input image.
        #[arg(long)]
        count: Option<usize>,
        /// Random square crop size applied before degrading.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        light_bank: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
    /// Train a restorer to undo synthetic degradations.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        severity_ratio: Option<f64>,
        /// Filter radius of the linear restorer.
        #[arg(long, default_value_t = 2)]
        radius: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long)]
        light_bank: Option<PathBuf>,
    },
    /// Refine a checkpoint on unlabeled hazy images.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        v1: Option<f64>,
        /// Gate threshold; `inf` rejects every update.
        #[arg(long, allow_hyphen_values = true)]
        v2: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// `contrast` or an external command template containing `{path}`.
        #[arg(long)]
        metric: Option<String>,
        /// Held-out probe images; 0 scores the current batch instead.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        gate_every: Option<usize>,
        #[arg(long)]
        light_bank: Option<PathBuf>,
    },
    /// Restore every image in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average predictions over overlapping patches: PATCH STRIDE.
        #[arg(long, num_args = 2, value_names = ["PATCH", "STRIDE"])]
        ensemble: Option<Vec<usize>>,
    },
    /// Score a directory; prints `image,score` CSV to stdout.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "contrast")]
        metric: String,
        #[arg(long, default_value_t = nightprior::iqa::DEFAULT_TIMEOUT_SECS)]
        timeout: f64,
        /// Concurrent external metric processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the RMS contrast of one image.
    Contrast { path: PathBuf },
    /// Rebuild an augmented image from its sidecar.
    Replay {
        #[arg(long)]
        sidecar: PathBuf,
        /// Directory holding the source clear image.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        light_bank: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
    /// Write procedural night scenes, e.g. as a fixture corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Sidecar written next to each augmented image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AugSidecar {
    /// File name of the clear source image.
    source: String,
    /// `[top, left, height, width]` of the crop that was degraded.
    crop: [usize; 4],
    record: AugRecord,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Augment {
            input,
            out,
            cfg,
            seed,
            count,
            crop,
            light_bank,
            channels,
        } => cmd_augment(&input, &out, &cfg, seed, count, crop, light_bank.as_deref(), channels),
        Command::TrainPrior {
            data,
            out,
            cfg,
            seed,
            steps,
            batch,
            lr,
            crop,
            severity_ratio,
            radius,
            channels,
            light_bank,
        } => {
            let mut rc = cfg.resolve()?;
            let t = &mut rc.train;
            set(&mut t.seed, seed);
            set(&mut t.steps, steps);
            set(&mut t.batch_size, batch);
            set(&mut t.lr, lr);
            set(&mut t.crop_size, crop);
            set(&mut rc.augment.severity_ratio, severity_ratio);
            cmd_train_prior(&data, &out, &cfg, rc, radius, channels, light_bank.as_deref())
        }
        Command::Refine {
            checkpoint,
            unlabeled,
            out,
            cfg,
            seed,
            steps,
            batch,
            lr,
            v1,
            v2,
            alpha,
            patch,
            stride,
            metric,
            probes,
            gate_every,
            light_bank,
        } => {
            let mut rc = cfg.resolve()?;
            let r = &mut rc.refine;
            set(&mut r.seed, seed);
            set(&mut r.steps, steps);
            set(&mut r.batch_size, batch);
            set(&mut r.lr, lr);
            set(&mut r.v1_thr, v1);
            set(&mut r.v2_thr, v2);
            set(&mut r.ema_alpha, alpha);
            set(&mut r.patch_size, patch);
            set(&mut r.stride, stride);
            set(&mut r.gate_every, gate_every);
            if let Some(m) = metric {
                r.metric = MetricHandle::parse(&m).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if let Some(n) = probes {
                r.probe = match n {
                    0 => ProbeMode::Current,
                    n => ProbeMode::HeldOut { count: n },
                };
            }
            cmd_refine(&checkpoint, &unlabeled, &out, &cfg, rc, light_bank.as_deref())
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            ensemble,
        } => cmd_infer(&checkpoint, &input, &out, ensemble.map(|v| (v[0], v[1]))),
        Command::Score {
            input,
            metric,
            timeout,
            jobs,
        } => cmd_score(&input, &metric, timeout, jobs),
        Command::Contrast { path } => {
            println!("{}", rms_contrast(&load_image(&path)?));
            Ok(())
        }
        Command::Replay {
            sidecar,
            input,
            out,
            light_bank,
            channels,
        } => cmd_replay(&sidecar, &input, &out, light_bank.as_deref(), channels),
        Command::Synth {
            out,
            count,
            height,
            width,
            channels,
            seed,
        } => cmd_synth(&out, count, height, width, channels, seed),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn load_bank(dir: Option<&Path>) -> CliResult<LightBank> {
    Ok(match dir {
        Some(d) => LightBank::load(d)?,
        None => LightBank::empty(),
    })
}

fn to_value<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(CliError::internal)
}

/// `<path>` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    input: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
    seed: u64,
    count: Option<usize>,
    crop: Option<usize>,
    light_bank: Option<&Path>,
    channels: usize,
) -> CliResult {
    let cfg = cfg_args.resolve()?.augment;
    cfg.validate()?;
    if crop == Some(0) {
        return Err(CliError::Usage("--crop must be positive".into()));
    }
    let set = ImageSet::load(input, channels)?;
    let bank = load_bank(light_bank)?;
    let count = count.unwrap_or(set.len());
    create_dir(out)?;
    let base = RngStream::new(seed, 0);
    let items: Vec<(Image, Image, AugSidecar)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = base.child(i as u64);
            let idx = i % set.len();
            let img = &set.images[idx];
            let (h, w) = (img.height(), img.width());
            let (ch, cw) = crop.map_or((h, w), |c| (c.min(h), c.min(w)));
            let top = rng.int_inclusive(0, h - ch);
            let left = rng.int_inclusive(0, w - cw);
            let clear = img.crop(top, left, ch, cw)?;
            let (degraded, record) = augment(&clear, &cfg, &mut rng, &bank)?;
            let sidecar = AugSidecar {
                source: set.names[idx].clone(),
                crop: [top, left, ch, cw],
                record,
            };
            Ok((degraded, minmax_normalize(&clear).image, sidecar))
        })
        .collect::<nightprior::Result<_>>()?;
    let mut outputs = Vec::new();
    for (i, (degraded, clear, sidecar)) in items.iter().enumerate() {
        let stem = format!("{i:05}");
        save_image(degraded, out.join(format!("aug_{stem}.png")))?;
        save_image(clear, out.join(format!("clear_{stem}.png")))?;
        let json = serde_json::to_string_pretty(sidecar).map_err(CliError::internal)?;
        let side = out.join(format!("aug_{stem}.json"));
        std::fs::write(&side, json + "\n")
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", side.display())))?;
        outputs.extend([
            format!("aug_{stem}.png"),
            format!("clear_{stem}.png"),
            format!("aug_{stem}.json"),
        ]);
    }
    let mut m = RunManifest::new("augment", seed, to_value(&cfg)?);
    cfg_args.stamp(&mut m);
    m.inputs = set.names.clone();
    m.outputs = outputs;
    m.write(&out.join("manifest.json"))?;
    eprintln!("augment: wrote {count} pairs to {}", out.display());
    Ok(())
}

fn cmd_train_prior(
    data: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
    rc: RunConfig,
    radius: usize,
    channels: usize,
    light_bank: Option<&Path>,
) -> CliResult {
    if channels != 1 && channels != 3 {
        return Err(CliError::Usage("--channels must be 1 or 3".into()));
    }
    rc.train.validate()?;
    rc.augment.validate()?;
    let set = ImageSet::load(data, channels)?;
    let bank = load_bank(light_bank)?;
    let mut model = LinearPatchRestorer::identity(radius, channels);
    let trace = train_prior(&set.images, &rc.augment, &bank, &rc.train, &mut model)?;
    Checkpoint::of(&model).save(out)?;
    let loss_path = sibling(out, ".loss.csv");
    std::fs::write(&loss_path, trace.to_csv())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", loss_path.display())))?;
    let mut m = RunManifest::new(
        "train-prior",
        rc.train.seed,
        to_value(&serde_json::json!({ "augment": rc.augment, "train": rc.train, "radius": radius, "channels": channels }))?,
    );
    cfg_args.stamp(&mut m);
    m.inputs = set.names.clone();
    m.outputs = vec![file_name(out), file_name(&loss_path)];
    m.write(&sibling(out, ".manifest.json"))?;
    if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
        eprintln!(
            "train-prior: {} steps, loss {first:.6} -> {last:.6}",
            trace.losses.len()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<LinearPatchRestorer> {
    Ok(LinearPatchRestorer::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn cmd_refine(
    checkpoint: &Path,
    unlabeled: &Path,
    out: &Path,
    cfg_args: &ConfigArgs,
    rc: RunConfig,
    light_bank: Option<&Path>,
) -> CliResult {
    let cfg = rc.refine;
    cfg.validate()?;
    let model = load_model(checkpoint)?;
    let set = ImageSet::load(unlabeled, model.channels())?;
    let bank = load_bank(light_bank)?;
    let mut state = TeacherStudentState::new(model);
    let report = refine_loop(&mut state, &set, &bank, &cfg)?;
    Checkpoint::of(&state.teacher).save(out)?;
    let audit_path = sibling(out, ".audit.jsonl");
    std::fs::write(&audit_path, report.to_jsonl()?)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", audit_path.display())))?;
    let mut m = RunManifest::new("refine", cfg.seed, to_value(&cfg)?);
    cfg_args.stamp(&mut m);
    m.inputs = std::iter::once(checkpoint.display().to_string())
        .chain(set.names.iter().cloned())
        .collect();
    m.outputs = vec![file_name(out), file_name(&audit_path)];
    m.write(&sibling(out, ".manifest.json"))?;
    eprintln!(
        "refine: {} steps, {} accepted, {} rejected; probes: {}",
        report.audit.len(),
        state.accepted,
        state.rejected,
        if report.probe_ids.is_empty() {
            "current batch".to_string()
        } else {
            report.probe_ids.join(",")
        }
    );
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    ensemble: Option<(usize, usize)>,
) -> CliResult {
    let model = load_model(checkpoint)?;
    let paths = list_images(input)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!("no images in {}", input.display())));
    }
    create_dir(out)?;
    let mut outputs = Vec::new();
    for path in &paths {
        let img = load_image(path)?;
        let restored = match ensemble {
            Some((patch, stride)) => {
                let n = tile_grid(img.height(), img.width(), patch, stride)?.len();
                eprintln!("infer: {}: ensemble of {n} patches", file_name(path));
                ensemble_predict(&model, &img, patch, stride)?.mean
            }
            None => model.forward(&img)?,
        };
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let name = format!("{stem}.png");
        save_image(&restored, out.join(&name))?;
        outputs.push(name);
    }
    let mut m = RunManifest::new(
        "infer",
        0,
        serde_json::json!({
            "descriptor": model.descriptor(),
            "ensemble": ensemble.map(|(p, s)| serde_json::json!({"patch": p, "stride": s})),
        }),
    );
    m.inputs = std::iter::once(checkpoint.display().to_string())
        .chain(paths.iter().map(|p| file_name(p)))
        .collect();
    m.outputs = outputs;
    m.write(&out.join("manifest.json"))
}

fn cmd_score(input: &Path, metric: &str, timeout: f64, jobs: usize) -> CliResult {
    if !(timeout > 0.0 && timeout.is_finite()) {
        return Err(CliError::Usage("--timeout must be positive".into()));
    }
    let handle = match MetricHandle::parse(metric).map_err(|e| CliError::Usage(e.to_string()))? {
        MetricHandle::External { command, .. } => MetricHandle::External {
            command,
            timeout_secs: timeout,
            max_jobs: jobs.max(1),
        },
        native => native,
    };
    let report = score_directory(&handle, input)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_replay(
    sidecar: &Path,
    input: &Path,
    out: &Path,
    light_bank: Option<&Path>,
    channels: usize,
) -> CliResult {
    let text = std::fs::read_to_string(sidecar)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", sidecar.display())))?;
    let side: AugSidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", sidecar.display())))?;
    let src = load_image(input.join(&side.source))?.to_channels(channels)?;
    let [top, left, h, w] = side.crop;
    let clear = src.crop(top, left, h, w)?;
    let bank = load_bank(light_bank)?;
    save_image(&replay(&clear, &side.record, &bank)?, out)?;
    Ok(())
}

fn cmd_synth(
    out: &Path,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> CliResult {
    if height == 0 || width == 0 || (channels != 1 && channels != 3) {
        return Err(CliError::Usage(
            "size must be positive and channels 1 or 3".into(),
        ));
    }
    create_dir(out)?;
    let scenes = night_scenes(count, height, width, channels, seed)?;
    let mut outputs = Vec::new();
    for (i, img) in scenes.iter().enumerate() {
        let name = format!("scene_{i:05}.png");
        save_image(img, out.join(&name))?;
        outputs.push(name);
    }
    let mut m = RunManifest::new(
        "synth",
        seed,
        serde_json::json!({"count": count, "height": height, "width": width, "channels": channels}),
    );
    m.outputs = outputs;
    m.write(&out.join("manifest.json"))
}
