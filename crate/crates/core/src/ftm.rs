//! Functional Tucker model: shared latent functions plus one core per timestep.
//!
//! Training alternates between an exact solve for every record's core sequence
//! (the objective is quadratic in the cores once the latents are fixed) and Adam
//! steps on the latent-function parameters.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::latent::{LatentArch, LatentFunctionSet};
use crate::nn::Adam;
use crate::tucker::{dot, kron, mode_contractions, CoordinateTuple, CoreTensor, FeatureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub spatial: Vec<f64>,
    pub value: f64,
}

impl Observation {
    pub fn new(spatial: Vec<f64>, value: f64) -> Self {
        Self { spatial, value }
    }
}

/// Sparse observations of one record: a (possibly empty) list per timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub timesteps: Vec<f64>,
    pub records: Vec<Vec<Observation>>,
    pub noise_std: f64,
}

impl ObservationSet {
    pub fn new(timesteps: Vec<f64>, records: Vec<Vec<Observation>>, noise_std: f64) -> Result<Self> {
        let set = Self {
            timesteps,
            records,
            noise_std,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.timesteps.is_empty(), "observation set has no timesteps");
        ensure!(
            self.timesteps.len() == self.records.len(),
            "{} timesteps but {} per-timestep lists",
            self.timesteps.len(),
            self.records.len()
        );
        ensure!(
            self.timesteps.windows(2).all(|w| w[0] < w[1]),
            "timesteps must be strictly increasing"
        );
        ensure!(self.noise_std >= 0.0, "noise std must be >= 0");
        for frame in &self.records {
            ensure!(
                frame.iter().all(|o| o.value.is_finite()),
                "observation values must be finite"
            );
        }
        Ok(())
    }

    pub fn num_entries(&self) -> usize {
        self.records.iter().map(Vec::len).sum()
    }

    /// Indices of timesteps with at least one observation.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&m| !self.records[m].is_empty()).collect()
    }

    pub fn coords_at(&self, m: usize) -> Vec<CoordinateTuple> {
        self.records[m]
            .iter()
            .map(|o| CoordinateTuple::new(o.spatial.clone(), self.timesteps[m]))
            .collect()
    }

    pub fn values_at(&self, m: usize) -> Vec<f64> {
        self.records[m].iter().map(|o| o.value).collect()
    }
}

/// Time-ordered cores sharing one rank tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreSequence {
    pub times: Vec<f64>,
    pub cores: Vec<CoreTensor>,
}

impl CoreSequence {
    pub fn new(times: Vec<f64>, cores: Vec<CoreTensor>) -> Result<Self> {
        ensure!(!cores.is_empty(), "core sequence is empty");
        ensure!(times.len() == cores.len(), "times and cores differ in length");
        ensure!(
            times.windows(2).all(|w| w[0] < w[1]),
            "core timestamps must be strictly increasing"
        );
        let ranks = cores[0].ranks();
        ensure!(
            cores.iter().all(|c| c.ranks() == ranks),
            "cores in a sequence must share ranks"
        );
        Ok(Self { times, cores })
    }

    /// Builds a sequence from a row-major `len x prod(ranks)` buffer.
    pub fn from_flat(times: Vec<f64>, ranks: &[usize], flat: &[f64]) -> Result<Self> {
        let p: usize = ranks.iter().product();
        ensure!(
            flat.len() == times.len() * p,
            "flat buffer has {} values, expected {}",
            flat.len(),
            times.len() * p
        );
        let cores = flat
            .chunks(p)
            .map(|c| CoreTensor::new(ranks.to_vec(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(times, cores)
    }

    pub fn ranks(&self) -> &[usize] {
        self.cores[0].ranks()
    }

    pub fn core_dim(&self) -> usize {
        self.cores[0].len()
    }

    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.cores.iter().flat_map(|c| c.data().iter().copied()).collect()
    }

    /// `Σ_{m≥2} ‖W_m − W_{m−1}‖²`.
    pub fn total_variation(&self) -> f64 {
        self.cores.windows(2).map(|w| w[1].squared_distance(&w[0])).sum()
    }

    /// Mean Frobenius distance between consecutive cores.
    pub fn mean_adjacent_difference(&self) -> f64 {
        if self.cores.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .cores
            .windows(2)
            .map(|w| w[1].squared_distance(&w[0]).sqrt())
            .sum();
        total / (self.cores.len() - 1) as f64
    }
}

/// Block-tridiagonal solve of
/// `min Σ_m ‖y_m − A_m w_m‖² + tv Σ_m ‖w_m − w_{m−1}‖² + ridge Σ_m ‖w_m‖²`
/// given the normal-equation pieces `(A_mᵀA_m, A_mᵀy_m)` for each timestep.
pub(crate) fn solve_block_tridiagonal(
    normals: &[(DMatrix<f64>, DVector<f64>)],
    tv: f64,
    ridge: f64,
) -> Result<Vec<DVector<f64>>> {
    let m = normals.len();
    ensure!(m > 0, "no timesteps to solve for");
    let p = normals[0].1.len();
    let singular = || {
        Error::numerical(
            "core system is singular; observations under-determine the cores, use ridge > 0"
                .to_string(),
        )
    };

    // forward elimination: D'_m = D_m − tv² D'_{m−1}⁻¹,  r'_m = h_m + tv D'_{m−1}⁻¹ r'_{m−1}
    let mut factors: Vec<Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(m);
    let mut rhs: Vec<DVector<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let (g, h) = &normals[i];
        let neighbors = (i > 0) as usize + (i + 1 < m) as usize;
        let mut d = g.clone();
        for j in 0..p {
            d[(j, j)] += ridge + tv * neighbors as f64;
        }
        let mut r = h.clone();
        if i > 0 && tv != 0.0 {
            let prev = &factors[i - 1];
            d -= prev.inverse() * (tv * tv);
            r += prev.solve(&rhs[i - 1]) * tv;
        }
        // symmetrize against round-off before factoring
        let d = (&d + d.transpose()) * 0.5;
        let ch = Cholesky::new(d).ok_or_else(singular)?;
        factors.push(ch);
        rhs.push(r);
    }

    let mut out = vec![DVector::zeros(p); m];
    out[m - 1] = factors[m - 1].solve(&rhs[m - 1]);
    for i in (0..m - 1).rev() {
        let r = &rhs[i] + &out[i + 1] * tv;
        out[i] = factors[i].solve(&r);
    }
    if out.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(singular());
    }
    Ok(out)
}

fn normals_for<F: FeatureMap + ?Sized>(
    latents: &F,
    obs: &ObservationSet,
) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    let p: usize = latents.ranks().iter().product();
    (0..obs.timesteps.len())
        .map(|m| {
            if obs.records[m].is_empty() {
                return Ok((DMatrix::zeros(p, p), DVector::zeros(p)));
            }
            let a = crate::tucker::design_matrix(latents, &obs.coords_at(m))?;
            let y = DVector::from_vec(obs.values_at(m));
            Ok((a.tr_mul(&a), a.tr_mul(&y)))
        })
        .collect()
}

/// Exact regularized least-squares core sequence for frozen latents:
/// `min Σ_m ‖y_m − A_m vec(W_m)‖² + beta·TV + ridge·Σ_m ‖vec(W_m)‖²`.
pub fn encode_observations<F: FeatureMap + ?Sized>(
    latents: &F,
    obs: &ObservationSet,
    beta: f64,
    ridge: f64,
) -> Result<CoreSequence> {
    obs.validate()?;
    ensure!(beta >= 0.0 && ridge >= 0.0, "beta and ridge must be >= 0");
    let k = latents.order();
    for frame in &obs.records {
        ensure!(
            frame.iter().all(|o| o.spatial.len() == k),
            "observation coordinates must have {k} spatial entries"
        );
    }
    let normals = normals_for(latents, obs)?;
    let ws = solve_block_tridiagonal(&normals, beta, ridge)?;
    let ranks = latents.ranks();
    let cores = ws
        .into_iter()
        .map(|w| CoreTensor::new(ranks.clone(), w.iter().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    CoreSequence::new(obs.timesteps.clone(), cores)
}

/// Mean squared residual over every observed entry plus `beta` times each record's
/// TV, weighted by the record's share of entries (the expectation over entries).
pub fn ftm_loss<F: FeatureMap + ?Sized>(
    latents: &F,
    core_batches: &[CoreSequence],
    dataset: &[ObservationSet],
    beta: f64,
) -> Result<f64> {
    ensure!(!dataset.is_empty(), "dataset is empty");
    ensure!(
        core_batches.len() == dataset.len(),
        "{} core sequences for {} records",
        core_batches.len(),
        dataset.len()
    );
    let total: usize = dataset.iter().map(ObservationSet::num_entries).sum();
    ensure!(total > 0, "dataset has no observed entries");
    let ranks = latents.ranks();
    let mut sq = 0.0;
    let mut tv = 0.0;
    for (seq, obs) in core_batches.iter().zip(dataset) {
        ensure!(
            seq.len() == obs.timesteps.len() && seq.ranks() == ranks.as_slice(),
            "core sequence shape does not match its record"
        );
        for (m, frame) in obs.records.iter().enumerate() {
            for o in frame {
                let c = CoordinateTuple::new(o.spatial.clone(), obs.timesteps[m]);
                let pred = crate::tucker::decode_entry(&seq.cores[m], latents, &c)?;
                sq += (pred - o.value).powi(2);
            }
        }
        tv += obs.num_entries() as f64 / total as f64 * seq.total_variation();
    }
    Ok(sq / total as f64 + beta * tv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtmConfig {
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub arch: LatentArch,
    /// TV weight `beta`.
    pub tv_weight: f64,
    pub learning_rate: f64,
    /// Adam steps on the latents between core solves.
    pub inner_steps: usize,
    /// Maximum number of alternation rounds.
    pub max_rounds: usize,
    /// Stop when a round improves the loss by less than this relative amount.
    pub tolerance: f64,
    pub ridge: f64,
    /// Fraction of each record's entries held out from fitting.
    pub holdout_fraction: f64,
}

impl Default for FtmConfig {
    fn default() -> Self {
        Self {
            ranks: vec![8, 8],
            arch: LatentArch::default(),
            tv_weight: 0.0,
            learning_rate: 1e-3,
            inner_steps: 5,
            max_rounds: 200,
            tolerance: 1e-7,
            ridge: 1e-6,
            holdout_fraction: 0.05,
        }
    }
}

impl FtmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ranks.is_empty(), "ranks must name at least one mode");
        ensure!(self.ranks.iter().all(|&r| r >= 1), "ranks must be >= 1");
        ensure!(self.tv_weight >= 0.0, "tv_weight must be >= 0");
        ensure!(self.ridge >= 0.0, "ridge must be >= 0");
        ensure!(self.learning_rate > 0.0, "learning rate must be > 0");
        ensure!(
            (0.0..1.0).contains(&self.holdout_fraction),
            "holdout fraction must be in [0, 1)"
        );
        ensure!(self.max_rounds >= 1, "max_rounds must be >= 1");
        Ok(())
    }
}

/// Affine map between raw and unit-scale cores: per-element mean, one pooled std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CoreStandardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(batches: &[CoreSequence]) -> Result<Self> {
        ensure!(!batches.is_empty(), "cannot fit a standardizer on no cores");
        let p = batches[0].core_dim();
        let n: usize = batches.iter().map(CoreSequence::len).sum();
        let mut mean = vec![0.0; p];
        for c in batches.iter().flat_map(|s| &s.cores) {
            ensure!(c.len() == p, "cores differ in size");
            for (m, v) in mean.iter_mut().zip(c.data()) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; p];
        for c in batches.iter().flat_map(|s| &s.cores) {
            for ((s, v), m) in var.iter_mut().zip(c.data()).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        // one pooled scale keeps weakly determined elements small
        let pooled = (var.iter().sum::<f64>() / p as f64).sqrt();
        let std = vec![if pooled > 1e-12 { pooled } else { 1.0 }; p];
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, seq: &CoreSequence) -> CoreSequence {
        self.map(seq, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, seq: &CoreSequence) -> CoreSequence {
        self.map(seq, |v, m, s| v * s + m)
    }

    fn map(&self, seq: &CoreSequence, f: impl Fn(f64, f64, f64) -> f64) -> CoreSequence {
        let mut out = seq.clone();
        for c in &mut out.cores {
            for ((v, m), s) in c.data_mut().iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedFtm {
    pub latents: LatentFunctionSet,
    /// Raw (unstandardized) core sequence of each training record.
    pub core_batches: Vec<CoreSequence>,
    pub standardizer: CoreStandardizer,
    pub config: FtmConfig,
    pub final_loss: f64,
    /// Loss right after each exact core solve.
    pub loss_trace: Vec<f64>,
    /// RMSE on held-out entries, when any were held out.
    pub holdout_rmse: Option<f64>,
    /// Relative L² error on the fitted entries.
    pub train_relative_error: f64,
}

impl TrainedFtm {
    /// Encodes a new record with the frozen latents, using the same per-record TV
    /// scaling as training.
    pub fn encode(&self, obs: &ObservationSet) -> Result<CoreSequence> {
        let beta = self.config.tv_weight * obs.num_entries() as f64;
        encode_observations(&self.latents, obs, beta, self.config.ridge)
    }

    pub fn standardized_batches(&self) -> Vec<CoreSequence> {
        self.core_batches
            .iter()
            .map(|s| self.standardizer.standardize(s))
            .collect()
    }
}

/// Observations of one record mapped onto per-mode tables of distinct coordinates.
struct PreparedRecord {
    /// `(unique index per mode, value)` per timestep.
    frames: Vec<Vec<(Vec<usize>, f64)>>,
    holdout: Vec<Vec<(Vec<usize>, f64)>>,
    timesteps: Vec<f64>,
}

struct ModeTables {
    values: Vec<Vec<f64>>,
    lookup: Vec<HashMap<u64, usize>>,
}

impl ModeTables {
    fn new(order: usize) -> Self {
        Self {
            values: vec![Vec::new(); order],
            lookup: vec![HashMap::new(); order],
        }
    }

    fn index(&mut self, coord: &[f64]) -> Vec<usize> {
        coord
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let values = &mut self.values[k];
                *self.lookup[k].entry(x.to_bits()).or_insert_with(|| {
                    values.push(x);
                    values.len() - 1
                })
            })
            .collect()
    }
}

struct Features {
    /// Per mode, `unique x R_k` row-major.
    per_mode: Vec<Vec<f64>>,
    ranks: Vec<usize>,
}

impl Features {
    fn eval(latents: &LatentFunctionSet, tables: &ModeTables) -> Self {
        let per_mode = latents
            .functions()
            .iter()
            .zip(&tables.values)
            .map(|(f, xs)| f.eval_batch(xs))
            .collect();
        Self {
            per_mode,
            ranks: latents.ranks(),
        }
    }

    fn row(&self, k: usize, i: usize) -> &[f64] {
        let r = self.ranks[k];
        &self.per_mode[k][i * r..(i + 1) * r]
    }

    fn kron(&self, idx: &[usize]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = idx.iter().enumerate().map(|(k, &i)| self.row(k, i).to_vec()).collect();
        kron(&parts)
    }

    fn normals(&self, frame: &[(Vec<usize>, f64)], p: usize) -> (DMatrix<f64>, DVector<f64>) {
        if frame.is_empty() {
            return (DMatrix::zeros(p, p), DVector::zeros(p));
        }
        let mut a = DMatrix::zeros(frame.len(), p);
        let mut y = DVector::zeros(frame.len());
        for (n, (idx, v)) in frame.iter().enumerate() {
            for (j, f) in self.kron(idx).into_iter().enumerate() {
                a[(n, j)] = f;
            }
            y[n] = *v;
        }
        (a.tr_mul(&a), a.tr_mul(&y))
    }
}

fn solve_record(
    feats: &Features,
    rec: &PreparedRecord,
    p: usize,
    tv: f64,
    ridge: f64,
) -> Result<Vec<DVector<f64>>> {
    let normals: Vec<_> = rec.frames.iter().map(|f| feats.normals(f, p)).collect();
    solve_block_tridiagonal(&normals, tv, ridge)
}

fn squared_error(feats: &Features, frames: &[Vec<(Vec<usize>, f64)>], cores: &[DVector<f64>]) -> (f64, f64) {
    let mut sq = 0.0;
    let mut norm = 0.0;
    for (frame, w) in frames.iter().zip(cores) {
        for (idx, v) in frame {
            let pred = dot(w.as_slice(), &feats.kron(idx));
            sq += (pred - v).powi(2);
            norm += v * v;
        }
    }
    (sq, norm)
}

/// Fits shared latent functions and per-record core sequences.
pub fn train_ftm(dataset: &[ObservationSet], config: &FtmConfig, seed: u64) -> Result<TrainedFtm> {
    config.validate()?;
    ensure!(!dataset.is_empty(), "training needs at least one record");
    let order = config.ranks.len();
    for (b, obs) in dataset.iter().enumerate() {
        obs.validate()?;
        ensure!(obs.num_entries() > 0, "record {b} has no observed entries");
        for frame in &obs.records {
            ensure!(
                frame.iter().all(|o| o.spatial.len() == order),
                "record {b}: coordinates must have {order} spatial entries"
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = LatentFunctionSet::new(&config.ranks, config.arch.clone(), seed)?;
    let p: usize = config.ranks.iter().product();

    // hold out a fixed fraction of every record's entries
    let mut tables = ModeTables::new(order);
    let mut records = Vec::with_capacity(dataset.len());
    for obs in dataset {
        let mut slots: Vec<(usize, usize)> = obs
            .records
            .iter()
            .enumerate()
            .flat_map(|(m, f)| (0..f.len()).map(move |n| (m, n)))
            .collect();
        slots.shuffle(&mut rng);
        let n_hold = ((slots.len() as f64) * config.holdout_fraction).floor() as usize;
        let n_hold = n_hold.min(slots.len().saturating_sub(1));
        let mut held = vec![vec![false; 0]; obs.records.len()];
        for (m, f) in obs.records.iter().enumerate() {
            held[m] = vec![false; f.len()];
        }
        for &(m, n) in &slots[..n_hold] {
            held[m][n] = true;
        }
        let mut frames = vec![Vec::new(); obs.records.len()];
        let mut holdout = vec![Vec::new(); obs.records.len()];
        for (m, f) in obs.records.iter().enumerate() {
            for (n, o) in f.iter().enumerate() {
                let entry = (tables.index(&o.spatial), o.value);
                if held[m][n] {
                    holdout[m].push(entry);
                } else {
                    frames[m].push(entry);
                }
            }
        }
        records.push(PreparedRecord {
            frames,
            holdout,
            timesteps: obs.timesteps.clone(),
        });
    }
    let counts: Vec<usize> = records
        .iter()
        .map(|r| r.frames.iter().map(Vec::len).sum())
        .collect();
    let total: usize = counts.iter().sum();
    let tv_for = |b: usize| config.tv_weight * counts[b] as f64;

    let loss_of = |feats: &Features, cores: &[Vec<DVector<f64>>]| -> f64 {
        let mut sq = 0.0;
        let mut tv = 0.0;
        for (b, rec) in records.iter().enumerate() {
            sq += squared_error(feats, &rec.frames, &cores[b]).0;
            let t: f64 = cores[b].windows(2).map(|w| (&w[1] - &w[0]).norm_squared()).sum();
            tv += counts[b] as f64 / total as f64 * t;
        }
        sq / total as f64 + config.tv_weight * tv
    };

    let mut adam = Adam::new(latents.num_params(), config.learning_rate);
    let mut trace = Vec::new();
    let mut cores: Vec<Vec<DVector<f64>>>;
    let mut round = 0;
    loop {
        let feats = Features::eval(&latents, &tables);
        cores = records
            .iter()
            .enumerate()
            .map(|(b, rec)| solve_record(&feats, rec, p, tv_for(b), config.ridge))
            .collect::<Result<_>>()?;
        let loss = loss_of(&feats, &cores);
        if !loss.is_finite() {
            return Err(Error::Training {
                step: round,
                reason: "non-finite FTM loss".into(),
                trace,
            });
        }
        trace.push(loss);
        round += 1;
        if round >= config.max_rounds {
            break;
        }
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if prev - loss <= config.tolerance * prev.abs().max(1e-300) && loss <= prev {
                break;
            }
        }
        if loss < 1e-14 {
            break;
        }

        for _ in 0..config.inner_steps {
            let feats = Features::eval(&latents, &tables);
            let grads = latent_gradient(&latents, &feats, &tables, &records, &cores, total);
            let mut flat = latents.flat_params();
            adam.step(&mut flat, &grads);
            latents.set_flat_params(&flat)?;
        }
    }

    let feats = Features::eval(&latents, &tables);
    let (mut sq, mut norm) = (0.0, 0.0);
    let (mut hsq, mut hn) = (0.0, 0usize);
    for (b, rec) in records.iter().enumerate() {
        let (s, n) = squared_error(&feats, &rec.frames, &cores[b]);
        sq += s;
        norm += n;
        hsq += squared_error(&feats, &rec.holdout, &cores[b]).0;
        hn += rec.holdout.iter().map(Vec::len).sum::<usize>();
    }
    let ranks = config.ranks.clone();
    let core_batches = cores
        .iter()
        .zip(&records)
        .map(|(ws, rec)| {
            let cs = ws
                .iter()
                .map(|w| CoreTensor::new(ranks.clone(), w.iter().copied().collect()))
                .collect::<Result<Vec<_>>>()?;
            CoreSequence::new(rec.timesteps.clone(), cs)
        })
        .collect::<Result<Vec<_>>>()?;
    let standardizer = CoreStandardizer::fit(&core_batches)?;
    Ok(TrainedFtm {
        latents,
        core_batches,
        standardizer,
        config: config.clone(),
        final_loss: *trace.last().unwrap_or(&f64::NAN),
        loss_trace: trace,
        holdout_rmse: (hn > 0).then(|| (hsq / hn as f64).sqrt()),
        train_relative_error: if norm > 0.0 { (sq / norm).sqrt() } else { sq.sqrt() },
    })
}

/// Gradient of the mean squared residual with respect to all latent parameters.
fn latent_gradient(
    latents: &LatentFunctionSet,
    feats: &Features,
    tables: &ModeTables,
    records: &[PreparedRecord],
    cores: &[Vec<DVector<f64>>],
    total: usize,
) -> Vec<f64> {
    let ranks = &feats.ranks;
    let order = ranks.len();
    let mut g_feat: Vec<Vec<f64>> = (0..order)
        .map(|k| vec![0.0; tables.values[k].len() * ranks[k]])
        .collect();
    let scale = 2.0 / total as f64;
    for (rec, ws) in records.iter().zip(cores) {
        for (frame, w) in rec.frames.iter().zip(ws) {
            for (idx, v) in frame {
                let parts: Vec<&[f64]> = idx.iter().enumerate().map(|(k, &i)| feats.row(k, i)).collect();
                let contr = mode_contractions(ranks, w.as_slice(), &parts);
                // contraction along mode 0 dotted with its feature is the prediction
                let pred = dot(&contr[0], parts[0]);
                let g = scale * (pred - v);
                for k in 0..order {
                    let r = ranks[k];
                    let dst = &mut g_feat[k][idx[k] * r..(idx[k] + 1) * r];
                    for (d, c) in dst.iter_mut().zip(&contr[k]) {
                        *d += g * c;
                    }
                }
            }
        }
    }

    let mut grads = Vec::with_capacity(latents.num_params());
    for (k, f) in latents.functions().iter().enumerate() {
        let (_, tape) = f.forward(&tables.values[k]);
        let mut g = vec![0.0; f.num_params()];
        f.backward(&tape, &g_feat[k], &mut g);
        grads.extend(g);
    }
    grads
}
