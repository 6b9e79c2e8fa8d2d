use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sdift_core::data::EvalReport;
use sdift_core::ftm::ObservationSet;
use sdift_core::mpdps::GuidanceMode;

pub const RECONSTRUCTION_FORMAT: &str = "sdift-reconstruction";
pub const SAMPLES_FORMAT: &str = "sdift-samples";
pub const EVAL_FORMAT: &str = "sdift-eval";
pub const PLOT_FORMAT: &str = "sdift-plot";

/// Decoded frames of one sampled sequence, with the matching ground truth when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub format: String,
    pub config_digest: String,
    /// Index into the dataset, when the observations came from a stored record.
    pub record: Option<usize>,
    pub mode: GuidanceMode,
    pub seed: u64,
    pub grid: Vec<usize>,
    pub times: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
    pub truth: Option<Vec<Vec<f64>>>,
    pub observations: ObservationSet,
    pub vrmse: Option<f64>,
    pub per_frame_vrmse: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGallery {
    pub format: String,
    pub config_digest: String,
    pub grid: Vec<usize>,
    pub times: Vec<f64>,
    pub seeds: Vec<u64>,
    /// One list of frames per seed.
    pub samples: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub format: String,
    pub config_digest: String,
    pub records: Vec<usize>,
    pub reports: BTreeMap<String, EvalReport>,
    /// Bootstrap confidence that MPDPS beats DPS, when both were run.
    pub mpdps_over_dps_confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotManifest {
    pub format: String,
    pub config_digest: String,
    pub inputs: Vec<PathBuf>,
    pub image: PathBuf,
    pub rows: Vec<String>,
    pub frames: Vec<usize>,
}

/// Fails if `path` exists and `force` is off; creates parent directories.
pub fn prepare_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists (use --force to overwrite)", path.display());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

/// Writes through a sibling temporary file so a failed run leaves no partial artifact.
pub fn write_atomic(path: &Path, force: bool, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    prepare_output(path, force)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path).with_context(|| format!("moving output to {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, force: bool, value: &T) -> Result<()> {
    write_atomic(path, force, |p| {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != format {
        bail!("{} is not a {format} file", path.display());
    }
    serde_json::from_value(value).with_context(|| format!("decoding {}", path.display()))
}

pub fn warn_digest(what: &str, found: &str, expected: &str) {
    if found != expected {
        eprintln!(
            "warning: {what} was written under config digest {}, current run is {}",
            short(found),
            short(expected)
        );
    }
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}
