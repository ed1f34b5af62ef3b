//! No-reference quality scoring.
//!
//! The native metric is RMS contrast. Learned metrics plug in as external
//! commands: the image is written to a temporary PNG, `{path}` in the
//! command template is replaced by its (shell-quoted) location, and the
//! command must print one finite decimal number on stdout and exit 0.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, MetricError, Result};
use crate::image::{list_images, load_image, rms_contrast, save_image, Image};

/// Environment variable overriding where metric inputs are staged.
pub const TMPDIR_ENV: &str = "NIGHTPRIOR_TMPDIR";

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricHandle {
    /// [`rms_contrast`], computed in process.
    Contrast,
    External {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        /// Upper bound on concurrently running metric processes.
        #[serde(default = "default_jobs")]
        max_jobs: usize,
    },
}

impl Default for MetricHandle {
    fn default() -> Self {
        MetricHandle::Contrast
    }
}

impl MetricHandle {
    /// An external metric; the first word of `command` must be executable.
    pub fn external(command: impl Into<String>, timeout: Duration) -> Result<Self, MetricError> {
        let command = command.into();
        resolve_program(&command)?;
        Ok(MetricHandle::External {
            command,
            timeout_secs: timeout.as_secs_f64(),
            max_jobs: 1,
        })
    }

    /// `"contrast"` selects the native metric; anything else is a command template.
    pub fn parse(spec: &str) -> Result<Self, MetricError> {
        match spec.trim() {
            "contrast" | "rms-contrast" => Ok(MetricHandle::Contrast),
            cmd => Self::external(cmd, Duration::from_secs_f64(DEFAULT_TIMEOUT_SECS)),
        }
    }

    pub fn with_max_jobs(self, jobs: usize) -> Self {
        match self {
            MetricHandle::External {
                command,
                timeout_secs,
                ..
            } => MetricHandle::External {
                command,
                timeout_secs,
                max_jobs: jobs.max(1),
            },
            other => other,
        }
    }

    pub fn name(&self) -> String {
        match self {
            MetricHandle::Contrast => "contrast".into(),
            MetricHandle::External { command, .. } => command.clone(),
        }
    }
}

fn resolve_program(command: &str) -> Result<PathBuf, MetricError> {
    let program = command
        .split_whitespace()
        .next()
        .ok_or_else(|| MetricError::NotExecutable(command.to_string()))?;
    let is_exec = |p: &Path| {
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            p.metadata()
                .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
                .unwrap_or(false)
        }
        #[cfg(not(unix))]
        {
            p.is_file()
        }
    };
    if program.contains('/') {
        let p = PathBuf::from(program);
        return if is_exec(&p) {
            Ok(p)
        } else {
            Err(MetricError::NotExecutable(command.to_string()))
        };
    }
    std::env::var_os("PATH")
        .and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|d| d.join(program))
                .find(|p| is_exec(p))
        })
        .ok_or_else(|| MetricError::NotExecutable(command.to_string()))
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn staging_dir() -> PathBuf {
    std::env::var_os(TMPDIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}

/// Parses exactly one finite real, optionally surrounded by whitespace.
pub fn parse_score(stdout: &str) -> Result<f64, MetricError> {
    let trimmed = stdout.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(MetricError::Unparseable(trimmed.to_string())),
    }
}

fn run_external(command: &str, timeout: Duration, image: &Image) -> Result<f64, MetricError> {
    let staged = tempfile::Builder::new()
        .prefix("nightprior-iqa-")
        .suffix(".png")
        .tempfile_in(staging_dir())
        .map_err(|e| MetricError::Staging(e.to_string()))?;
    save_image(image, staged.path()).map_err(|e| MetricError::Staging(e.to_string()))?;
    let quoted = shell_quote(&staged.path().to_string_lossy());
    let line = command.replace("{path}", &quoted);
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&line)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(MetricError::Spawn)?;
    // drain pipes on threads so a chatty metric cannot block on a full pipe
    let mut out_pipe = child.stdout.take().expect("stdout is piped");
    let mut err_pipe = child.stderr.take().expect("stderr is piped");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = out_pipe.read_to_string(&mut s);
        s
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = err_pipe.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait().map_err(MetricError::Spawn)? {
            Some(status) => break status,
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(MetricError::Timeout(timeout));
            }
            None => std::thread::sleep(Duration::from_millis(5)),
        }
    };
    let stdout = out_reader.join().unwrap_or_default();
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(MetricError::NonZeroExit {
            code: status.code(),
            stderr: stderr.trim().to_string(),
        });
    }
    parse_score(&stdout)
}

/// Scores a single image.
pub fn score(metric: &MetricHandle, image: &Image) -> Result<f64, MetricError> {
    match metric {
        MetricHandle::Contrast => Ok(rms_contrast(image)),
        MetricHandle::External {
            command,
            timeout_secs,
            ..
        } => run_external(command, Duration::from_secs_f64(*timeout_secs), image),
    }
}

/// Per-image scores and their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub entries: Vec<(String, f64)>,
    pub mean: f64,
}

impl ScoreReport {
    pub fn from_entries(entries: Vec<(String, f64)>) -> Self {
        let mean = entries.iter().map(|(_, s)| s).sum::<f64>() / entries.len() as f64;
        Self { entries, mean }
    }

    /// `image,score` rows followed by a `mean,<value>` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,score\n");
        for (name, v) in &self.entries {
            s.push_str(&format!("{name},{v}\n"));
        }
        s.push_str(&format!("mean,{}\n", self.mean));
        s
    }
}

/// Scores named images, keeping their order.
pub fn score_images(metric: &MetricHandle, images: &[(String, Image)]) -> Result<ScoreReport> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("nothing to score".into()));
    }
    let jobs = match metric {
        MetricHandle::Contrast => rayon::current_num_threads(),
        MetricHandle::External { max_jobs, .. } => (*max_jobs).max(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let scores: Vec<f64> = pool.install(|| {
        images
            .par_iter()
            .map(|(_, img)| score(metric, img))
            .collect::<Result<_, MetricError>>()
    })?;
    Ok(ScoreReport::from_entries(
        images
            .iter()
            .map(|(n, _)| n.clone())
            .zip(scores)
            .collect(),
    ))
}

/// Scores every image in `dir` in lexicographic file-name order.
pub fn score_directory(metric: &MetricHandle, dir: impl AsRef<Path>) -> Result<ScoreReport> {
    let dir = dir.as_ref();
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let images = paths
        .iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_image(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    score_images(metric, &images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;

    fn sh(cmd: &str) -> MetricHandle {
        MetricHandle::external(cmd, Duration::from_secs(10)).unwrap()
    }

    #[test]
    fn native_constant_is_zero() {
        let img = Image::filled(8, 8, 3, 0.4).unwrap();
        assert_eq!(score(&MetricHandle::Contrast, &img).unwrap(), 0.0);
    }

    #[test]
    fn echo_stub_is_parsed() {
        let img = Image::zeros(2, 2, 1).unwrap();
        assert_eq!(score(&sh("echo 42.0"), &img).unwrap(), 42.0);
        assert_eq!(score(&sh("printf '  7.5\\n\\n'"), &img).unwrap(), 7.5);
    }

    #[test]
    fn path_is_substituted() {
        // the staged file exists while the command runs
        let img = Image::zeros(2, 2, 1).unwrap();
        let m = sh("test -s {path} && echo 1");
        assert_eq!(score(&m, &img).unwrap(), 1.0);
    }

    #[test]
    fn garbage_output_is_a_parse_error() {
        let img = Image::zeros(2, 2, 1).unwrap();
        assert!(matches!(
            score(&sh("echo abc"), &img),
            Err(MetricError::Unparseable(s)) if s == "abc"
        ));
        assert!(matches!(
            score(&sh("echo 1 2"), &img),
            Err(MetricError::Unparseable(_))
        ));
        assert!(matches!(
            score(&sh("echo inf"), &img),
            Err(MetricError::Unparseable(_))
        ));
    }

    #[test]
    fn failing_command_reports_exit() {
        let img = Image::zeros(2, 2, 1).unwrap();
        let err = score(&sh("sh -c 'echo boom >&2; exit 3'"), &img).unwrap_err();
        match err {
            MetricError::NonZeroExit { code, stderr } => {
                assert_eq!(code, Some(3));
                assert_eq!(stderr, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slow_command_times_out() {
        let img = Image::zeros(2, 2, 1).unwrap();
        let m = MetricHandle::external("sleep 5", Duration::from_millis(100)).unwrap();
        let t = Instant::now();
        assert!(matches!(score(&m, &img), Err(MetricError::Timeout(_))));
        assert!(t.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn unknown_program_is_rejected() {
        assert!(matches!(
            MetricHandle::parse("definitely-not-a-real-binary-xyz {path}"),
            Err(MetricError::NotExecutable(_))
        ));
        assert_eq!(MetricHandle::parse("contrast").unwrap(), MetricHandle::Contrast);
    }

    #[test]
    fn directory_mean_and_order() {
        let dir = tempfile::tempdir().unwrap();
        // contrast 127.5 * (amplitude); pick two images with known contrast
        let half = |v: f64| Image::new(1, 2, 1, vec![0.0, v]).unwrap();
        save_image(&half(1.0), dir.path().join("b.png")).unwrap();
        save_image(&half(0.2), dir.path().join("a.png")).unwrap();
        let r = score_directory(&MetricHandle::Contrast, dir.path()).unwrap();
        assert_eq!(r.entries[0].0, "a.png");
        assert_eq!(r.entries[1].0, "b.png");
        let mean = (r.entries[0].1 + r.entries[1].1) / 2.0;
        assert_eq!(r.mean, mean);
        assert!((r.entries[1].1 - 127.5).abs() < 1e-9);
    }

    #[test]
    fn report_mean_of_known_scores() {
        let r = ScoreReport::from_entries(vec![("x".into(), 10.0), ("y".into(), 30.0)]);
        assert_eq!(r.mean, 20.0);
        assert_eq!(r.to_csv(), "image,score\nx,10\ny,30\nmean,20\n");
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            score_directory(&MetricHandle::Contrast, dir.path()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn handles_serialize() {
        let m = MetricHandle::External {
            command: "echo 1".into(),
            timeout_secs: 5.0,
            max_jobs: 2,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<MetricHandle>(&s).unwrap(), m);
        let c: MetricHandle = serde_json::from_str(r#"{"kind":"contrast"}"#).unwrap();
        assert_eq!(c, MetricHandle::Contrast);
    }
}
