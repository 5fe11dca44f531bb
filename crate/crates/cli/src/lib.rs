//! Subcommands of the `rvsb` tool.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rvsb_core::eval::{self, SweepGrid};
use rvsb_core::pipeline::{self, Dataset};
use rvsb_core::seed::SeedTree;
use rvsb_core::vaenet::{self, Checkpoint, InferMode};
use rvsb_core::{gait_sim, ErrorKind};
use serde::Serialize;

pub use config::{Profile, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rvsb_core::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rvsb", version, about = "Radar vital-sign interference removal toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration layered over the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    pub profile: Profile,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one walking-in-place interference signal as t,I,Q CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize a mixture/clean dataset container.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on a dataset container.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (or `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a checkpoint on one stored mixture.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset sample index.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Mean)]
        mode: ModeArg,
        /// Also write input/output/truth magnitudes as one PNG.
        #[arg(long)]
        triptych: bool,
    },
    /// Evaluate a checkpoint over the SIR x noise grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Natural-log display values in CSV and PNG.
        #[arg(long)]
        log_scale: bool,
        /// One colour scale across all grids of this run.
        #[arg(long)]
        shared_scale: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Recon,
    BinError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sample,
    Mean,
}

impl From<ModeArg> for InferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sample => InferMode::Sample,
            ModeArg::Mean => InferMode::Mean,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), common.profile)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Config(format!("missing --{name} (or paths.{name} in the config)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| rvsb_core::Error::Io { path: dir.to_path_buf(), source: e }.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(rvsb_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| rvsb_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            cmd_simulate(&cfg, &common.out).map(|_| ())
        }
        Command::SynthData { common } => {
            let cfg = load_config(&common)?;
            cmd_synth_data(&cfg, &common.out).map(|_| ())
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common)?;
            let data = required(data, &cfg.paths.data, "data")?;
            cmd_train(&cfg, &data, &common.out).map(|_| ())
        }
        Command::Infer { common, checkpoint, data, index, mode, triptych } => {
            let cfg = load_config(&common)?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            cmd_infer(&cfg, &ckpt, &data, index, mode.into(), triptych, &common.out).map(|_| ())
        }
        Command::Sweep { common, checkpoint, data, metric, log_scale, shared_scale } => {
            let cfg = load_config(&common)?;
            let ckpt = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let data = required(data, &cfg.paths.data, "data")?;
            cmd_sweep(&cfg, &ckpt, &data, metric, log_scale, shared_scale, &common.out).map(|_| ())
        }
    }
}

pub const SIMULATE_FILE: &str = "interference.csv";

/// Writes `out/interference.csv`; returns its path.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.gait.validate()?;
    let mut rng = SeedTree::new(cfg.seed).rng("simulate", 0);
    let signal = gait_sim::simulate(&cfg.gait, &mut rng)?;
    create_dir(out)?;
    let path = out.join(SIMULATE_FILE);
    pipeline::write_signal_csv(&path, &signal)?;
    Ok(path)
}

pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<pipeline::DatasetManifest> {
    Ok(pipeline::build_dataset(&cfg.dataset, cfg.seed, out)?)
}

/// Trains with `train.seed` replaced by the run seed.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<vaenet::TrainOutcome> {
    let ds = pipeline::load_dataset(data)?;
    let tc = vaenet::TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    Ok(vaenet::train(&ds, &cfg.network, &tc, Some(out))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct InferRecord {
    pub index: usize,
    pub mode: InferMode,
    pub shape: [usize; 3],
    pub norm_scale: f64,
    pub estimate: String,
}

pub const ESTIMATE_FILE: &str = "estimate.f32";
pub const TRIPTYCH_FILE: &str = "triptych.png";

/// Writes the peak-normalized estimate planes and `estimate.json`.
pub fn cmd_infer(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    data: &Path,
    index: usize,
    mode: InferMode,
    triptych: bool,
    out: &Path,
) -> Result<InferRecord> {
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let ds = pipeline::load_dataset(data)?;
    if index >= ds.len() {
        return Err(CliError::Config(format!("index {index} out of range for {} samples", ds.len())));
    }
    let pair = ds.pair(index)?;
    let mut rng = SeedTree::new(cfg.seed).rng("infer", index as u64);
    let est = vaenet::infer(&ckpt, &pair.mixture, mode, None, &mut rng)?;
    create_dir(out)?;
    let planes: Vec<u8> = est.to_planes().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(out.join(ESTIMATE_FILE), planes)
        .map_err(|e| rvsb_core::Error::Io { path: out.join(ESTIMATE_FILE), source: e })?;
    if triptych {
        eval::write_magnitude_panels(&out.join(TRIPTYCH_FILE), &[&pair.mixture, &est, &pair.clean])?;
    }
    let (b, f) = est.shape();
    let rec = InferRecord { index, mode, shape: [2, b, f], norm_scale: pair.norm_scale, estimate: ESTIMATE_FILE.into() };
    write_json(&out.join("estimate.json"), &rec)?;
    Ok(rec)
}

/// Runs the sweep and writes one CSV/PNG pair per grid plus `sweep.json`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    data: &Path,
    metric: Metric,
    log_scale: bool,
    shared_scale: bool,
    out: &Path,
) -> Result<Vec<SweepGrid>> {
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let ds: Dataset = pipeline::load_dataset(data)?;
    let sc = eval::SweepConfig { seed: cfg.seed, ..cfg.sweep.clone() };
    let grids = match metric {
        Metric::Recon => vec![eval::recon_sweep(&ckpt, &ds, &sc)?],
        Metric::BinError => eval::bin_error_sweep(&ckpt, &ds, &sc)?.to_vec(),
    };
    create_dir(out)?;
    let refs: Vec<&SweepGrid> = grids.iter().collect();
    let range = if shared_scale { eval::shared_range(&refs, log_scale) } else { None };
    for g in &grids {
        eval::export_grid(g, &out.join(g.metric.file_stem()), log_scale, range)?;
    }
    write_json(&out.join("sweep.json"), &grids)?;
    Ok(grids)
}
