//! Synthetic spatiotemporal fields, observation masks and evaluation metrics.
//!
//! Every field is a closed-form function of `(x ∈ [0,1]^K, t ∈ [0,1])`, so ground
//! truth can be evaluated off-grid. Frame `m` of `M` sits at `t_m = m / (M − 1)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::ftm::{Observation, ObservationSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    TravelingPulse,
    SeparableLowrank,
    AdvectingMixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFieldSpec {
    pub kind: FieldKind,
    /// Grid points per spatial mode.
    pub grid: Vec<usize>,
    pub frames: usize,
    pub seed: u64,
    /// Pulses or waves per record.
    #[serde(default = "default_components")]
    pub components: usize,
    /// Largest displacement over the whole time horizon.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Basis size per mode for `separable_lowrank`.
    #[serde(default = "default_rank")]
    pub rank: Vec<usize>,
}

fn default_components() -> usize {
    3
}

fn default_speed() -> f64 {
    0.3
}

fn default_rank() -> Vec<usize> {
    vec![2, 2]
}

impl Default for SyntheticFieldSpec {
    fn default() -> Self {
        Self {
            kind: FieldKind::TravelingPulse,
            grid: vec![64, 64],
            frames: 16,
            seed: 0,
            components: default_components(),
            speed: default_speed(),
            rank: default_rank(),
        }
    }
}

impl SyntheticFieldSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.grid.is_empty(), "grid needs at least one mode");
        ensure!(self.grid.iter().all(|&n| n >= 4), "grid sizes must be >= 4");
        ensure!(self.frames >= 2, "need at least two frames");
        ensure!(self.components >= 1, "need at least one component");
        ensure!(self.speed >= 0.0 && self.speed.is_finite(), "speed must be finite and >= 0");
        if self.kind == FieldKind::SeparableLowrank {
            ensure!(
                self.rank.len() == self.grid.len() && self.rank.iter().all(|&r| r >= 1),
                "separable rank must have one entry >= 1 per mode"
            );
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.grid.len()
    }

    pub fn volume(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn timesteps(&self) -> Vec<f64> {
        frame_times(self.frames)
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `M` evenly spaced times on `[0, 1]`.
pub fn frame_times(m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..m).map(|i| i as f64 / (m - 1) as f64).collect(),
    }
}

/// Coordinates of every grid point, mode 1 slowest, each in `[0, 1]`.
pub fn grid_coords(grid: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = grid.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; grid.len()];
    for _ in 0..total {
        out.push(
            idx.iter()
                .zip(grid)
                .map(|(&i, &n)| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 })
                .collect(),
        );
        for k in (0..grid.len()).rev() {
            idx[k] += 1;
            if idx[k] < grid[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

/// Parameters of one record's closed-form field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldParams {
    TravelingPulse {
        amplitudes: Vec<f64>,
        centers: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
    SeparableLowrank {
        rank: Vec<usize>,
        /// Per basis product: `offset + amp · sin(2π freq t + phase)`.
        offset: Vec<f64>,
        amp: Vec<f64>,
        freq: Vec<f64>,
        phase: Vec<f64>,
    },
    AdvectingMixture {
        amplitudes: Vec<f64>,
        wavenumbers: Vec<Vec<f64>>,
        phases: Vec<f64>,
        velocity: Vec<f64>,
    },
}

/// Fixed per-mode basis of the separable field.
fn separable_basis(r: usize, x: f64) -> f64 {
    if r % 2 == 0 {
        (PI * (r / 2 + 1) as f64 * x).sin()
    } else {
        (PI * (r / 2 + 1) as f64 * x).cos()
    }
}

impl FieldParams {
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            FieldParams::TravelingPulse {
                amplitudes,
                centers,
                velocities,
                widths,
            } => {
                let mut v = 0.0;
                for j in 0..amplitudes.len() {
                    let d2: f64 = x
                        .iter()
                        .enumerate()
                        .map(|(k, &xk)| (xk - centers[j][k] - velocities[j][k] * t).powi(2))
                        .sum();
                    v += amplitudes[j] * (-d2 / (2.0 * widths[j] * widths[j])).exp();
                }
                v
            }
            FieldParams::SeparableLowrank {
                rank,
                offset,
                amp,
                freq,
                phase,
            } => {
                let total: usize = rank.iter().product();
                let mut v = 0.0;
                let mut idx = vec![0usize; rank.len()];
                for i in 0..total {
                    let c = offset[i] + amp[i] * (2.0 * PI * freq[i] * t + phase[i]).sin();
                    let basis: f64 = idx.iter().zip(x).map(|(&r, &xk)| separable_basis(r, xk)).product();
                    v += c * basis;
                    for k in (0..rank.len()).rev() {
                        idx[k] += 1;
                        if idx[k] < rank[k] {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
                v
            }
            FieldParams::AdvectingMixture {
                amplitudes,
                wavenumbers,
                phases,
                velocity,
            } => {
                let mut v = 0.0;
                for j in 0..amplitudes.len() {
                    let arg: f64 = x
                        .iter()
                        .enumerate()
                        .map(|(k, &xk)| wavenumbers[j][k] * (xk - velocity[k] * t))
                        .sum();
                    v += amplitudes[j] * (2.0 * PI * arg + phases[j]).sin();
                }
                v
            }
        }
    }

    fn draw<R: Rng>(spec: &SyntheticFieldSpec, rng: &mut R) -> Self {
        let k = spec.order();
        let c = spec.components;
        let direction = |rng: &mut R| -> Vec<f64> {
            let v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a / n).collect()
        };
        match spec.kind {
            FieldKind::TravelingPulse => {
                let mut centers = Vec::with_capacity(c);
                let mut velocities = Vec::with_capacity(c);
                for _ in 0..c {
                    let dir = direction(rng);
                    let speed = spec.speed * rng.random_range(0.5..1.0);
                    let v: Vec<f64> = dir.iter().map(|d| d * speed).collect();
                    // keep the whole trajectory inside the domain
                    let start: Vec<f64> = v.iter().map(|&vk| rng.random_range(0.3..0.7) - 0.5 * vk).collect();
                    centers.push(start);
                    velocities.push(v);
                }
                FieldParams::TravelingPulse {
                    amplitudes: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
                    centers,
                    velocities,
                    widths: (0..c).map(|_| rng.random_range(0.1..0.2)).collect(),
                }
            }
            FieldKind::SeparableLowrank => {
                let n: usize = spec.rank.iter().product();
                FieldParams::SeparableLowrank {
                    rank: spec.rank.clone(),
                    offset: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    amp: (0..n).map(|_| rng.random_range(0.2..0.8)).collect(),
                    freq: (0..n).map(|_| rng.random_range(0.25..1.0) * spec.speed / default_speed()).collect(),
                    phase: (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                }
            }
            FieldKind::AdvectingMixture => {
                let dir = direction(rng);
                FieldParams::AdvectingMixture {
                    amplitudes: (0..c).map(|_| rng.random_range(0.3..1.0)).collect(),
                    wavenumbers: (0..c)
                        .map(|_| (0..k).map(|_| rng.random_range(0..3) as f64).collect())
                        .collect(),
                    phases: (0..c).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                    velocity: dir.iter().map(|d| d * spec.speed).collect(),
                }
            }
        }
    }
}

/// One record: closed-form parameters and the rendered frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub params: FieldParams,
    pub timesteps: Vec<f64>,
    /// `M` frames, each `grid volume` values in grid order.
    pub frames: Vec<Vec<f64>>,
}

impl SyntheticRecord {
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        self.params.eval(x, t)
    }

    /// Renders the field at `times` on an arbitrary grid.
    pub fn render(&self, grid: &[usize], times: &[f64]) -> Vec<Vec<f64>> {
        let coords = grid_coords(grid);
        times
            .iter()
            .map(|&t| coords.iter().map(|x| self.params.eval(x, t)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticFieldSpec,
    pub records: Vec<SyntheticRecord>,
}

impl SyntheticDataset {
    pub fn timesteps(&self) -> Vec<f64> {
        self.spec.timesteps()
    }
}

pub fn make_synthetic_dataset(spec: &SyntheticFieldSpec, records: usize) -> Result<SyntheticDataset> {
    spec.validate()?;
    ensure!(records >= 1, "need at least one record");
    let times = spec.timesteps();
    let out = (0..records)
        .map(|b| {
            // per-record streams keep records independent of the record count
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(b as u64 + 1);
            let params = FieldParams::draw(spec, &mut rng);
            let mut rec = SyntheticRecord {
                params,
                timesteps: times.clone(),
                frames: Vec::new(),
            };
            rec.frames = rec.render(&spec.grid, &times);
            rec
        })
        .collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        records: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationSetting {
    /// Every frame observed.
    #[serde(rename = "1")]
    All,
    /// Every other frame observed, counting back from the last one.
    #[serde(rename = "2")]
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub rho: f64,
    pub setting: ObservationSetting,
    /// Draw a fresh point subset per frame (otherwise one subset is reused).
    pub resample_per_frame: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            rho: 0.03,
            setting: ObservationSetting::All,
            resample_per_frame: true,
        }
    }
}

impl MaskConfig {
    pub fn points_per_frame(&self, volume: usize) -> usize {
        (self.rho * volume as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// Frames that receive observations.
    pub fn observed_frames(&self, m: usize) -> Vec<usize> {
        match self.setting {
            ObservationSetting::All => (0..m).collect(),
            ObservationSetting::Alternate => (0..m).filter(|i| (m - 1 - i) % 2 == 0).collect(),
        }
    }
}

/// Samples sparse observations of one record's gridded frames.
pub fn mask_observations(
    frames: &[Vec<f64>],
    grid: &[usize],
    timesteps: &[f64],
    mask: &MaskConfig,
    seed: u64,
) -> Result<ObservationSet> {
    ensure!(mask.rho > 0.0 && mask.rho <= 1.0, "rho must be in (0, 1]");
    ensure!(frames.len() == timesteps.len(), "frames and timesteps differ in length");
    let coords = grid_coords(grid);
    let volume = coords.len();
    ensure!(frames.iter().all(|f| f.len() == volume), "frame size does not match the grid");
    let n = mask.points_per_frame(volume);
    ensure!(n >= 1, "rho = {} leaves no points on a grid of {volume}", mask.rho);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observed = mask.observed_frames(frames.len());
    let shared = sample_indices(&mut rng, volume, n).into_vec();
    let mut records = vec![Vec::new(); frames.len()];
    for &m in &observed {
        let idx = if mask.resample_per_frame {
            sample_indices(&mut rng, volume, n).into_vec()
        } else {
            shared.clone()
        };
        records[m] = idx
            .into_iter()
            .map(|i| Observation::new(coords[i].clone(), frames[m][i]))
            .collect();
    }
    ObservationSet::new(timesteps.to_vec(), records, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Laplacian,
    /// Centered, unit-variance Poisson counts with mean 4, so the noise is skewed
    /// and discrete.
    Poisson,
}

const POISSON_RATE: f64 = 4.0;

/// Adds `level · scale · ξ` to every observed value, with `ξ` unit-variance noise of
/// the given kind, and records the resulting noise std on the set.
pub fn add_noise(obs: &mut ObservationSet, kind: NoiseKind, level: f64, scale: f64, seed: u64) -> Result<()> {
    ensure!(level >= 0.0 && scale >= 0.0, "noise level and scale must be >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = Poisson::new(POISSON_RATE).map_err(|e| Error::contract(e.to_string()))?;
    for frame in &mut obs.records {
        for o in frame {
            let xi = match kind {
                NoiseKind::Gaussian => rng.sample::<f64, _>(StandardNormal),
                NoiseKind::Laplacian => {
                    let u: f64 = rng.random_range(-0.5..0.5);
                    -u.signum() * (1.0 - 2.0 * u.abs()).ln() / 2f64.sqrt()
                }
                NoiseKind::Poisson => (poisson.sample(&mut rng) - POISSON_RATE) / POISSON_RATE.sqrt(),
            };
            o.value += level * scale * xi;
        }
    }
    obs.noise_std = level * scale;
    Ok(())
}

/// RMSE divided by the population standard deviation of `truth`.
pub fn vrmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    ensure!(pred.len() == truth.len(), "prediction and truth differ in length");
    ensure!(truth.len() >= 2, "need at least two values");
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let var = truth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ensure!(var > 0.0, "ground truth is constant; VRMSE is undefined");
    let mse = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok((mse / var).sqrt())
}

/// Population standard deviation of all values.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Fraction of bootstrap resamples whose mean of `diffs` is strictly positive.
pub fn bootstrap_confidence(diffs: &[f64], resamples: usize, seed: u64) -> f64 {
    if diffs.is_empty() || resamples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = diffs.len();
    let mut positive = 0;
    for _ in 0..resamples {
        let s: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
        if s > 0.0 {
            positive += 1;
        }
    }
    positive as f64 / resamples as f64
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vrmse_mean: f64,
    pub vrmse_std: f64,
    pub per_seed: Vec<f64>,
    /// Mean over seeds of each frame's VRMSE.
    pub per_frame: Vec<f64>,
    pub runtime_secs: f64,
    pub config_digest: String,
}

const MAGIC: &[u8; 8] = b"SDIFTDS\0";
const VERSION: u32 = 1;

/// Everything in a dataset file apart from the arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub spec: SyntheticFieldSpec,
    pub spec_digest: String,
    /// Digest of the run configuration that produced the file.
    pub config_digest: String,
    pub num_records: usize,
    pub params: Vec<FieldParams>,
    /// Per record: observation noise std, when observations are stored.
    pub noise_std: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub records: Vec<SyntheticRecord>,
    pub observations: Vec<Option<ObservationSet>>,
}

impl DatasetFile {
    pub fn new(dataset: SyntheticDataset, observations: Vec<Option<ObservationSet>>, config_digest: &str) -> Result<Self> {
        ensure!(
            observations.len() == dataset.records.len(),
            "one (possibly empty) observation set per record"
        );
        let header = DatasetHeader {
            spec_digest: dataset.spec.digest(),
            config_digest: config_digest.to_string(),
            num_records: dataset.records.len(),
            params: dataset.records.iter().map(|r| r.params.clone()).collect(),
            noise_std: observations.iter().map(|o| o.as_ref().map(|o| o.noise_std)).collect(),
            spec: dataset.spec,
        };
        Ok(Self {
            header,
            records: dataset.records,
            observations,
        })
    }

    pub fn dataset(&self) -> SyntheticDataset {
        SyntheticDataset {
            spec: self.header.spec.clone(),
            records: self.records.clone(),
        }
    }

    /// Layout (all little endian): magic `SDIFTDS\0`, `u32` version, `u64` header
    /// length, JSON header, then per record the `M` timestamps, `M x volume` frame
    /// values, a `u64` row count and that many `(t, x_1..x_K, value)` rows.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        for (rec, obs) in self.records.iter().zip(&self.observations) {
            for &t in &rec.timesteps {
                w.write_f64::<LittleEndian>(t)?;
            }
            for frame in &rec.frames {
                for &v in frame {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            let rows: Vec<(f64, &Observation)> = obs
                .iter()
                .flat_map(|o| {
                    o.records
                        .iter()
                        .zip(&o.timesteps)
                        .flat_map(|(f, &t)| f.iter().map(move |ob| (t, ob)))
                })
                .collect();
            w.write_u64::<LittleEndian>(rows.len() as u64)?;
            for (t, o) in rows {
                w.write_f64::<LittleEndian>(t)?;
                for &x in &o.spatial {
                    w.write_f64::<LittleEndian>(x)?;
                }
                w.write_f64::<LittleEndian>(o.value)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not an sdift dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: DatasetHeader = serde_json::from_slice(&buf)?;
        header.spec.validate()?;
        if header.params.len() != header.num_records || header.noise_std.len() != header.num_records {
            return Err(Error::Format("header record counts disagree".into()));
        }
        let m = header.spec.frames;
        let volume = header.spec.volume();
        let k = header.spec.order();
        let mut records = Vec::with_capacity(header.num_records);
        let mut observations = Vec::with_capacity(header.num_records);
        for b in 0..header.num_records {
            let timesteps = (0..m).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
            let mut frames = Vec::with_capacity(m);
            for _ in 0..m {
                frames.push((0..volume).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?);
            }
            let rows = r.read_u64::<LittleEndian>()? as usize;
            let obs = match header.noise_std[b] {
                Some(noise_std) => {
                    let mut lists = vec![Vec::new(); m];
                    for _ in 0..rows {
                        let t = r.read_f64::<LittleEndian>()?;
                        let spatial = (0..k).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
                        let value = r.read_f64::<LittleEndian>()?;
                        let slot = timesteps
                            .iter()
                            .position(|&u| u.to_bits() == t.to_bits())
                            .ok_or_else(|| Error::Format(format!("observation at unknown time {t}")))?;
                        lists[slot].push(Observation::new(spatial, value));
                    }
                    Some(ObservationSet::new(timesteps.clone(), lists, noise_std)?)
                }
                None => {
                    if rows != 0 {
                        return Err(Error::Format("observation rows for a record without observations".into()));
                    }
                    None
                }
            };
            records.push(SyntheticRecord {
                params: header.params[b].clone(),
                timesteps,
                frames,
            });
            observations.push(obs);
        }
        Ok(Self {
            header,
            records,
            observations,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
