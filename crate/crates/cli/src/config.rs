//! Run configuration: one TOML document per run, merged onto defaults, with
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdift_core::data::{MaskConfig, NoiseKind, SyntheticFieldSpec};
use sdift_core::ftm::FtmConfig;
use sdift_core::gpsd::{DenoiserArch, GpsdTrainConfig, NoiseSchedule};
use sdift_core::latent::LatentArch;
use sdift_core::mpdps::GuidanceConfig;

/// Default output root when neither `--out` nor `out_dir` is given.
pub const OUTPUT_ENV: &str = "SDIFT_OUTPUT_DIR";
const FALLBACK_OUTPUT: &str = "sdift-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Not covered by the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub data: DataConfig,
    pub ftm: FtmConfig,
    pub gpsd: GpsdTrainConfig,
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub field: SyntheticFieldSpec,
    /// Total records, including the test records at the end.
    pub records: usize,
    pub test_records: usize,
    /// Sparse observations the FTM is trained on.
    pub train_mask: MaskConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mask: MaskConfig,
    /// Test records used by `evaluate`, one sampler seed each.
    pub seeds: usize,
    /// Decoding grid; the data grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
}

/// Observation noise of `level` times the training data std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            seed: 0,
            data: DataConfig {
                field: SyntheticFieldSpec {
                    grid: vec![32, 32],
                    components: 2,
                    seed: 1,
                    rank: vec![3, 3],
                    ..SyntheticFieldSpec::default()
                },
                records: 200,
                test_records: 10,
                train_mask: MaskConfig {
                    rho: 0.15,
                    ..MaskConfig::default()
                },
            },
            ftm: FtmConfig {
                ranks: vec![6, 6],
                arch: LatentArch {
                    hidden_layers: 2,
                    width: 32,
                    first_omega: 6.0,
                },
                tv_weight: 1e-4,
                learning_rate: 3e-3,
                inner_steps: 5,
                max_rounds: 60,
                tolerance: 1e-6,
                ridge: 1e-6,
                holdout_fraction: 0.05,
            },
            gpsd: GpsdTrainConfig {
                epochs: 1500,
                batch_size: 16,
                subsequence_len: 16,
                arch: DenoiserArch {
                    blocks: 4,
                    ..DenoiserArch::default()
                },
                ..GpsdTrainConfig::default()
            },
            schedule: NoiseSchedule::default(),
            guidance: GuidanceConfig {
                zeta: 2e-4,
                ..GuidanceConfig::default()
            },
            eval: EvalConfig {
                mask: MaskConfig::default(),
                seeds: 10,
                grid: None,
                noise: None,
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then the file at `path`, then each `key.path=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(Self::default()).context("serializing defaults")?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut doc, user);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.field.validate()?;
        self.ftm.validate()?;
        self.gpsd.validate()?;
        self.schedule.validate()?;
        self.guidance.validate()?;
        ensure!(self.data.records >= 1, "data.records must be >= 1");
        ensure!(
            self.data.test_records < self.data.records,
            "data.test_records must leave at least one training record"
        );
        ensure!(
            self.ftm.ranks.len() == self.data.field.grid.len(),
            "ftm.ranks has {} modes, the field has {}",
            self.ftm.ranks.len(),
            self.data.field.grid.len()
        );
        if let Some(g) = &self.eval.grid {
            ensure!(
                g.len() == self.data.field.grid.len() && g.iter().all(|&n| n >= 1),
                "eval.grid must have one positive size per mode"
            );
        }
        Ok(())
    }

    /// SHA-256 over the configuration, excluding the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn output_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT))
    }

    pub fn eval_grid(&self) -> Vec<usize> {
        self.eval.grid.clone().unwrap_or_else(|| self.data.field.grid.clone())
    }

    pub fn train_records(&self) -> usize {
        self.data.records - self.data.test_records
    }
}

/// Recursive table merge. A table whose `kind` tag changes is replaced whole.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            let retagged = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key.path=value");
    };
    let key = key.trim();
    ensure!(!key.is_empty(), "override {spec:?} has an empty key");
    // bare words become strings
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut patch = value;
    for part in key.split('.').rev() {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), patch);
        patch = toml::Value::Table(t);
    }
    merge(doc, patch);
    Ok(())
}
