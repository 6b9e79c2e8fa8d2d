use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};

use sdift_core::checkpoint::{self, GpsdCheckpoint};
use sdift_core::data::{
    add_noise, bootstrap_confidence, frame_times, make_synthetic_dataset, mask_observations, mean_std,
    population_std, DatasetFile, EvalReport, MaskConfig, SyntheticRecord,
};
use sdift_core::ftm::{train_ftm, ObservationSet, TrainedFtm};
use sdift_core::gpsd::{train_gpsd, unconditional_sample};
use sdift_core::mpdps::{GuidanceConfig, GuidanceMode};
use sdift_core::pipeline::{score_frames, GridDecoder, Model};

use crate::artifacts::{
    read_json, short, warn_digest, write_atomic, write_json, EvalFile, Reconstruction, SampleGallery, EVAL_FORMAT,
    RECONSTRUCTION_FORMAT, SAMPLES_FORMAT,
};
use crate::config::RunConfig;

/// Everything a command needs besides its own flags.
pub struct Ctx {
    pub cfg: RunConfig,
    pub digest: String,
    pub force: bool,
}

impl Ctx {
    pub fn new(cfg: RunConfig, force: bool) -> Self {
        Self {
            digest: cfg.digest(),
            cfg,
            force,
        }
    }

    pub fn root(&self) -> PathBuf {
        self.cfg.output_root()
    }

    pub fn or_default(&self, given: Option<PathBuf>, name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.root().join(name))
    }

    fn load_dataset(&self, path: &Path) -> Result<DatasetFile> {
        let file = DatasetFile::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
        warn_digest("dataset", &file.header.config_digest, &self.digest);
        Ok(file)
    }

    fn load_ftm(&self, path: &Path) -> Result<TrainedFtm> {
        if !path.exists() {
            bail!("no FTM checkpoint at {} (run train-ftm first)", path.display());
        }
        let (ftm, digest) =
            checkpoint::load_ftm(path).with_context(|| format!("loading FTM checkpoint {}", path.display()))?;
        warn_digest("FTM checkpoint", &digest, &self.digest);
        Ok(ftm)
    }

    fn load_gpsd(&self, path: &Path) -> Result<GpsdCheckpoint> {
        if !path.exists() {
            bail!("no GPSD checkpoint at {} (run train-gpsd first)", path.display());
        }
        let (ckpt, digest) =
            checkpoint::load_gpsd(path).with_context(|| format!("loading GPSD checkpoint {}", path.display()))?;
        warn_digest("GPSD checkpoint", &digest, &self.digest);
        Ok(ckpt)
    }
}

pub fn gen_data(ctx: &Ctx, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let t = Instant::now();
    let ds = make_synthetic_dataset(&cfg.data.field, cfg.data.records)?;
    let times = ds.timesteps();
    let n_train = cfg.train_records();
    let observations = ds
        .records
        .iter()
        .enumerate()
        .map(|(b, r)| {
            if b < n_train {
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(b as u64);
                mask_observations(&r.frames, &cfg.data.field.grid, &times, &cfg.data.train_mask, seed).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<sdift_core::Result<Vec<_>>>()?;
    let file = DatasetFile::new(ds, observations, &ctx.digest)?;
    write_atomic(out, ctx.force, |p| Ok(file.save(p)?))?;
    println!(
        "wrote {} records ({} training, {} test) to {} in {:.1} s",
        cfg.data.records,
        n_train,
        cfg.data.test_records,
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn write_trace(path: &Path, force: bool, digest: &str, header: &str, rows: &[(usize, f64)]) -> Result<()> {
    write_atomic(path, force, |p| {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        writeln!(f, "# config_digest={digest}")?;
        writeln!(f, "{header}")?;
        for (i, v) in rows {
            writeln!(f, "{i},{v:e}")?;
        }
        f.flush()?;
        Ok(())
    })
}

pub fn train_ftm_cmd(ctx: &Ctx, dataset: &Path, out: &Path) -> Result<()> {
    let file = ctx.load_dataset(dataset)?;
    let obs: Vec<ObservationSet> = file.observations.iter().flatten().cloned().collect();
    ensure!(!obs.is_empty(), "{} holds no training observations", dataset.display());
    crate::artifacts::prepare_output(out, ctx.force)?;
    let t = Instant::now();
    let ftm = train_ftm(&obs, &ctx.cfg.ftm, ctx.cfg.seed)?;
    write_atomic(out, ctx.force, |p| Ok(checkpoint::save_ftm(p, &ctx.digest, &ftm)?))?;
    let trace: Vec<(usize, f64)> = ftm.loss_trace.iter().copied().enumerate().collect();
    write_trace(&out.with_extension("loss.csv"), true, &ctx.digest, "round,loss", &trace)?;
    println!(
        "trained FTM on {} records in {:.1} s: {} rounds, loss {:.4e}, relative error {:.4e}{}",
        obs.len(),
        t.elapsed().as_secs_f64(),
        ftm.loss_trace.len(),
        ftm.final_loss,
        ftm.train_relative_error,
        ftm.holdout_rmse.map(|h| format!(", held-out rmse {h:.4e}")).unwrap_or_default()
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train_gpsd_cmd(ctx: &Ctx, ftm_path: &Path, out: &Path) -> Result<()> {
    let ftm = ctx.load_ftm(ftm_path)?;
    crate::artifacts::prepare_output(out, ctx.force)?;
    let cores = ftm.standardized_batches();
    let t = Instant::now();
    let model = train_gpsd(&cores, &ctx.cfg.gpsd)?;
    let ckpt = GpsdCheckpoint {
        model,
        schedule: ctx.cfg.schedule.clone(),
    };
    write_atomic(out, ctx.force, |p| Ok(checkpoint::save_gpsd(p, &ctx.digest, &ckpt)?))?;
    let epochs: Vec<(usize, f64)> = ckpt.model.loss_trace.iter().copied().enumerate().collect();
    write_trace(&out.with_extension("loss.csv"), true, &ctx.digest, "epoch,loss", &epochs)?;
    write_trace(
        &out.with_extension("heldout.csv"),
        true,
        &ctx.digest,
        "step,heldout_loss",
        &ckpt.model.heldout_trace,
    )?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained GPSD on {} sequences in {:.1} s: final epoch loss {:.4}, held-out {:.4}",
        cores.len(),
        t.elapsed().as_secs_f64(),
        last(&ckpt.model.loss_trace),
        ckpt.model.heldout_trace.last().map(|p| p.1).unwrap_or(f64::NAN)
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn sample(ctx: &Ctx, ftm_path: &Path, gpsd_path: &Path, count: usize, out: &Path) -> Result<()> {
    ensure!(count >= 1, "--count must be >= 1");
    let ftm = ctx.load_ftm(ftm_path)?;
    let ckpt = ctx.load_gpsd(gpsd_path)?;
    let grid = ctx.cfg.eval_grid();
    let times = frame_times(ctx.cfg.data.field.frames);
    let decoder = GridDecoder::new(&ftm.latents, &grid)?;
    let seeds: Vec<u64> = (0..count as u64).map(|s| ctx.cfg.seed + s).collect();
    let mut samples = Vec::with_capacity(count);
    for &seed in &seeds {
        let g = &ckpt.model;
        let z = unconditional_sample(&g.denoiser, &ckpt.schedule, &times, &ftm.config.ranks, &g.noise, seed)?;
        samples.push(decoder.decode(&ftm.standardizer.destandardize(&z))?);
    }
    let gallery = SampleGallery {
        format: SAMPLES_FORMAT.into(),
        config_digest: ctx.digest.clone(),
        grid,
        times,
        seeds,
        samples,
    };
    write_json(out, ctx.force, &gallery)?;
    println!("wrote {count} unconditional samples to {}", out.display());
    Ok(())
}

/// Inputs shared by `reconstruct` and `evaluate`.
struct Stage {
    file: DatasetFile,
    ftm: TrainedFtm,
    ckpt: GpsdCheckpoint,
    times: Vec<f64>,
    decoder: GridDecoder,
    data_std: f64,
}

impl Stage {
    fn load(ctx: &Ctx, dataset: &Path, ftm: &Path, gpsd: &Path) -> Result<Self> {
        let file = ctx.load_dataset(dataset)?;
        let ftm = ctx.load_ftm(ftm)?;
        let ckpt = ctx.load_gpsd(gpsd)?;
        let decoder = GridDecoder::new(&ftm.latents, &ctx.cfg.eval_grid())?;
        let times = file.header.spec.timesteps();
        let train: Vec<f64> = file
            .records
            .iter()
            .zip(&file.observations)
            .filter(|(_, o)| o.is_some())
            .flat_map(|(r, _)| r.frames.concat())
            .collect();
        let data_std = if train.is_empty() { 1.0 } else { population_std(&train) };
        Ok(Self {
            file,
            ftm,
            ckpt,
            times,
            decoder,
            data_std,
        })
    }

    /// Test records: those stored without observations.
    fn test_records(&self) -> Vec<usize> {
        (0..self.file.records.len()).filter(|&i| self.file.observations[i].is_none()).collect()
    }

    fn observe(&self, ctx: &Ctx, record: usize, mask: &MaskConfig) -> Result<ObservationSet> {
        let r = &self.file.records[record];
        let mut obs = mask_observations(&r.frames, &self.file.header.spec.grid, &self.times, mask, 77 + record as u64)?;
        if let Some(n) = &ctx.cfg.eval.noise {
            add_noise(&mut obs, n.kind, n.level, self.data_std, 500 + record as u64)?;
        }
        Ok(obs)
    }

    fn run(&self, ctx: &Ctx, obs: &ObservationSet, mode: GuidanceMode, seed: u64) -> Result<Vec<Vec<f64>>> {
        let guidance = GuidanceConfig {
            mode,
            ..ctx.cfg.guidance.clone()
        };
        let model = Model {
            ftm: &self.ftm,
            gpsd: &self.ckpt.model,
            schedule: &self.ckpt.schedule,
        };
        let seq = model.reconstruct(obs, &self.times, &guidance, seed)?;
        Ok(self.decoder.decode(&seq)?)
    }

    fn truth(&self, record: &SyntheticRecord) -> Vec<Vec<f64>> {
        record.render(&self.decoder.grid, &self.times)
    }
}

pub struct ReconstructArgs {
    pub dataset: PathBuf,
    pub ftm: PathBuf,
    pub gpsd: PathBuf,
    pub record: usize,
    pub observations: Option<PathBuf>,
    pub mode: GuidanceMode,
    pub out: PathBuf,
}

pub fn reconstruct(ctx: &Ctx, a: &ReconstructArgs) -> Result<()> {
    let stage = Stage::load(ctx, &a.dataset, &a.ftm, &a.gpsd)?;
    let tests = stage.test_records();
    let (record, obs) = match &a.observations {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let obs: ObservationSet =
                serde_json::from_str(&text).with_context(|| format!("parsing observations {}", p.display()))?;
            (None, obs)
        }
        None => {
            ensure!(
                a.record < tests.len(),
                "test record {} out of range, the dataset has {} test records",
                a.record,
                tests.len()
            );
            let idx = tests[a.record];
            (Some(idx), stage.observe(ctx, idx, &ctx.cfg.eval.mask)?)
        }
    };
    let seed = ctx.cfg.seed + a.record as u64;
    let frames = stage.run(ctx, &obs, a.mode, seed)?;
    let truth = record.map(|i| stage.truth(&stage.file.records[i]));
    let score = truth.as_ref().map(|t| score_frames(&frames, t)).transpose()?;
    let rec = Reconstruction {
        format: RECONSTRUCTION_FORMAT.into(),
        config_digest: ctx.digest.clone(),
        record,
        mode: a.mode,
        seed,
        grid: stage.decoder.grid.clone(),
        times: stage.times.clone(),
        frames,
        truth,
        observations: obs,
        vrmse: score.as_ref().map(|s| s.0),
        per_frame_vrmse: score.map(|s| s.1),
    };
    write_json(&a.out, ctx.force, &rec)?;
    let mode = mode_name(a.mode);
    match (rec.vrmse, record) {
        (Some(v), Some(idx)) => println!("{mode} reconstruction of test record {} (dataset record {idx}): VRMSE {v:.4}", a.record),
        _ => println!("{mode} reconstruction from {} observations", rec.observations.num_entries()),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn evaluate(ctx: &Ctx, dataset: &Path, ftm: &Path, gpsd: &Path, modes: &[GuidanceMode], out: &Path) -> Result<()> {
    let stage = Stage::load(ctx, dataset, ftm, gpsd)?;
    let tests = stage.test_records();
    let n = ctx.cfg.eval.seeds.min(tests.len());
    ensure!(n >= 1, "the dataset has no test records");
    let records = tests[..n].to_vec();
    let mut reports = BTreeMap::new();
    let mut per_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &mode in modes {
        let t = Instant::now();
        let mut per_seed = Vec::new();
        let mut per_frame = vec![0.0; stage.times.len()];
        for (i, &idx) in records.iter().enumerate() {
            let obs = stage.observe(ctx, idx, &ctx.cfg.eval.mask)?;
            let frames = stage.run(ctx, &obs, mode, ctx.cfg.seed + i as u64)?;
            let (total, frame) = score_frames(&frames, &stage.truth(&stage.file.records[idx]))?;
            per_seed.push(total);
            for (acc, v) in per_frame.iter_mut().zip(frame) {
                *acc += v / n as f64;
            }
        }
        let (m, s) = mean_std(&per_seed);
        let name = mode_name(mode).to_string();
        println!("{name:>6}: VRMSE {m:.4} ± {s:.4} over {n} records ({:.1} s)", t.elapsed().as_secs_f64());
        per_mode.insert(name.clone(), per_seed.clone());
        reports.insert(
            name,
            EvalReport {
                vrmse_mean: m,
                vrmse_std: s,
                per_seed,
                per_frame,
                runtime_secs: t.elapsed().as_secs_f64(),
                config_digest: ctx.digest.clone(),
            },
        );
    }
    let confidence = match (per_mode.get("dps"), per_mode.get("mpdps")) {
        (Some(d), Some(p)) => {
            let diffs: Vec<f64> = d.iter().zip(p).map(|(a, b)| a - b).collect();
            Some(bootstrap_confidence(&diffs, 10_000, ctx.cfg.seed))
        }
        _ => None,
    };
    if let Some(c) = confidence {
        println!("confidence that MPDPS beats DPS: {c:.3}");
    }
    let file = EvalFile {
        format: EVAL_FORMAT.into(),
        config_digest: ctx.digest.clone(),
        records,
        reports,
        mpdps_over_dps_confidence: confidence,
    };
    write_json(out, ctx.force, &file)?;
    println!("wrote {} (config {})", out.display(), short(&ctx.digest));
    Ok(())
}

pub fn mode_name(mode: GuidanceMode) -> &'static str {
    match mode {
        GuidanceMode::None => "none",
        GuidanceMode::Dps => "dps",
        GuidanceMode::Mpdps => "mpdps",
    }
}

pub fn load_reconstructions(paths: &[PathBuf]) -> Result<Vec<Reconstruction>> {
    paths.iter().map(|p| read_json(p, RECONSTRUCTION_FORMAT)).collect()
}
