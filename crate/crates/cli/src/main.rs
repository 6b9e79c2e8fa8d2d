mod artifacts;
mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Ctx, ReconstructArgs};
use config::RunConfig;
use sdift_core::mpdps::GuidanceMode;

#[derive(Debug, Parser)]
#[command(name = "sdift", version, about = "Sparse field reconstruction with sequential diffusion over functional Tucker cores")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration (defaults are used for missing keys)
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set gpsd.epochs=50` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory [default: $SDIFT_OUTPUT_DIR, else ./sdift-out]
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Dps,
    Mpdps,
}

impl From<Mode> for GuidanceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => GuidanceMode::None,
            Mode::Dps => GuidanceMode::Dps,
            Mode::Mpdps => GuidanceMode::Mpdps,
        }
    }
}

#[derive(Debug, Args)]
struct Inputs {
    /// Dataset file [default: <out>/dataset.sdift]
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// FTM checkpoint [default: <out>/ftm.json]
    #[arg(long)]
    ftm: Option<PathBuf>,
    /// GPSD checkpoint [default: <out>/gpsd.json]
    #[arg(long)]
    gpsd: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with sparse training observations
    GenData {
        /// Total number of records (overrides data.records)
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Fit the functional Tucker model to the training observations
    TrainFtm {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Train the sequential diffusion model on the FTM cores
    TrainGpsd {
        #[arg(long)]
        ftm: Option<PathBuf>,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Draw unconditional samples and decode them on the evaluation grid
    Sample {
        #[arg(long)]
        ftm: Option<PathBuf>,
        #[arg(long)]
        gpsd: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Reconstruct one test record (or a JSON observation set) from sparse observations
    Reconstruct {
        #[command(flatten)]
        inputs: Inputs,
        /// Test record index
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// JSON observation set to use instead of a test record
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Mpdps)]
        mode: Mode,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Score every guidance mode on the test records
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Mode::None, Mode::Dps, Mode::Mpdps])]
        modes: Vec<Mode>,
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Render reconstruction files as a PNG frame strip
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Number of evenly spaced frames to show
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    if let Some(out) = &cli.common.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    if let Command::GenData { records: Some(n), .. } = &cli.command {
        overrides.push(format!("data.records={n}"));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    let ctx = Ctx::new(cfg, cli.common.force);

    match cli.command {
        Command::GenData { path, .. } => commands::gen_data(&ctx, &ctx.or_default(path, "dataset.sdift")),
        Command::TrainFtm { dataset, path } => commands::train_ftm_cmd(
            &ctx,
            &ctx.or_default(dataset, "dataset.sdift"),
            &ctx.or_default(path, "ftm.json"),
        ),
        Command::TrainGpsd { ftm, path } => {
            commands::train_gpsd_cmd(&ctx, &ctx.or_default(ftm, "ftm.json"), &ctx.or_default(path, "gpsd.json"))
        }
        Command::Sample { ftm, gpsd, count, path } => commands::sample(
            &ctx,
            &ctx.or_default(ftm, "ftm.json"),
            &ctx.or_default(gpsd, "gpsd.json"),
            count,
            &ctx.or_default(path, "samples.json"),
        ),
        Command::Reconstruct {
            inputs,
            record,
            observations,
            mode,
            path,
        } => {
            let name = format!("recon_{record}_{}.json", commands::mode_name(mode.into()));
            let args = ReconstructArgs {
                dataset: ctx.or_default(inputs.dataset, "dataset.sdift"),
                ftm: ctx.or_default(inputs.ftm, "ftm.json"),
                gpsd: ctx.or_default(inputs.gpsd, "gpsd.json"),
                record,
                observations,
                mode: mode.into(),
                out: ctx.or_default(path, &name),
            };
            commands::reconstruct(&ctx, &args)
        }
        Command::Evaluate { inputs, modes, path } => {
            let modes: Vec<GuidanceMode> = modes.into_iter().map(Into::into).collect();
            commands::evaluate(
                &ctx,
                &ctx.or_default(inputs.dataset, "dataset.sdift"),
                &ctx.or_default(inputs.ftm, "ftm.json"),
                &ctx.or_default(inputs.gpsd, "gpsd.json"),
                &modes,
                &ctx.or_default(path, "eval.json"),
            )
        }
        Command::Plot { inputs, frames, path } => {
            let recs = commands::load_reconstructions(&inputs)?;
            for r in &recs {
                artifacts::warn_digest("reconstruction", &r.config_digest, &ctx.digest);
            }
            let out = ctx.or_default(path, "strip.png");
            let m = plot::plot(&inputs, &recs, frames, &out, &ctx.digest, ctx.force)?;
            println!("wrote {} ({} rows x {} frames)", out.display(), m.rows.len(), m.frames.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
