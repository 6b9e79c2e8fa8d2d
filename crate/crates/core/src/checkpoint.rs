//! Versioned JSON checkpoints.
//!
//! A checkpoint is `{format, version, config_digest, digest, payload}` where `digest`
//! is the SHA-256 of the payload's compact JSON text (keys sorted). Floats are
//! written with round-trip precision, so parameters reload bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::hex_digest;
use crate::error::{Error, Result};
use crate::ftm::TrainedFtm;
use crate::gpsd::{NoiseSchedule, TrainedGpsd};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const FTM_FORMAT: &str = "sdift-ftm";
pub const GPSD_FORMAT: &str = "sdift-gpsd";

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    config_digest: String,
    digest: String,
    payload: serde_json::Value,
}

/// Denoiser checkpoint payload: the trained model plus sampling defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsdCheckpoint {
    pub model: TrainedGpsd,
    pub schedule: NoiseSchedule,
}

pub fn to_string<T: Serialize>(format: &str, config_digest: &str, payload: &T) -> Result<String> {
    let payload = serde_json::to_value(payload)?;
    let text = serde_json::to_string(&payload)?;
    let env = Envelope {
        format: format.to_string(),
        version: CHECKPOINT_VERSION,
        config_digest: config_digest.to_string(),
        digest: hex_digest(text.as_bytes()),
        payload,
    };
    Ok(serde_json::to_string(&env)?)
}

/// Parses a checkpoint, checking format, version and payload digest. Returns the
/// payload and the digest of the configuration that wrote it.
pub fn from_str<T: DeserializeOwned>(format: &str, text: &str) -> Result<(T, String)> {
    let env: Envelope = serde_json::from_str(text)?;
    if env.format != format {
        return Err(Error::Format(format!("expected a {format} checkpoint, found {}", env.format)));
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", env.version)));
    }
    let text = serde_json::to_string(&env.payload)?;
    if hex_digest(text.as_bytes()) != env.digest {
        return Err(Error::Format("checkpoint payload does not match its digest".into()));
    }
    Ok((serde_json::from_value(env.payload)?, env.config_digest))
}

pub fn save<T: Serialize>(path: &Path, format: &str, config_digest: &str, payload: &T) -> Result<()> {
    std::fs::write(path, to_string(format, config_digest, payload)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(T, String)> {
    from_str(format, &std::fs::read_to_string(path)?)
}

pub fn save_ftm(path: &Path, config_digest: &str, model: &TrainedFtm) -> Result<()> {
    save(path, FTM_FORMAT, config_digest, model)
}

pub fn load_ftm(path: &Path) -> Result<(TrainedFtm, String)> {
    load(path, FTM_FORMAT)
}

pub fn save_gpsd(path: &Path, config_digest: &str, ckpt: &GpsdCheckpoint) -> Result<()> {
    save(path, GPSD_FORMAT, config_digest, ckpt)
}

pub fn load_gpsd(path: &Path) -> Result<(GpsdCheckpoint, String)> {
    load(path, GPSD_FORMAT)
}
