use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panfuse::ablate::{ablate_stages, rows_to_csv};
use panfuse::config::RunConfig;
use panfuse::data::make_toy_data;
use panfuse::evaluate::{evaluate, Fuser, Method, Mode};
use panfuse::pipeline::{pretrain_spatial, pretrain_spectral, train, TrainOptions};
use panfuse::runlog::RunLock;
use panfuse::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "panfuse", version, about = "Model-driven pansharpening with masked-autoencoder priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines). Defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set stages=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::desk(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test/full-resolution dataset.
    MakeToyData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain the convolutional masked autoencoder (stage 1).
    PretrainSpatial {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory [default: <run_dir>/stage1]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the spectral token masked autoencoder (stage 2).
    PretrainSpectral {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory [default: <run_dir>/stage2]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the unfolding network.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        /// Checkpoint directory [default: <run_dir>/model]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accept pretrained checkpoints from a different config or dataset.
        #[arg(long)]
        allow_mixed_config: bool,
    },
    /// Fuse one raster pair, or every pair in a directory.
    Fuse {
        /// ihs, brovey, gs, sfim, gfpca or unfolding
        #[arg(long)]
        method: Method,
        /// Trained model directory (unfolding only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Resolution ratio for classical methods.
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        /// Low-resolution MS raster (single-pair mode).
        #[arg(long, requires = "pan", conflicts_with = "input_dir")]
        lrms: Option<PathBuf>,
        #[arg(long, requires = "lrms")]
        pan: Option<PathBuf>,
        /// Directory of `<id>_lrms` / `<id>_pan` rasters.
        #[arg(long)]
        input_dir: Option<PathBuf>,
        /// Output raster base (single-pair mode) or directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused rasters against references.
    Evaluate {
        /// Directory of `<id>_fused` rasters.
        #[arg(long)]
        fused: PathBuf,
        /// Directory holding `<id>_gt` (reduced) or `<id>_lrms` + `<id>_pan` (full).
        #[arg(long)]
        reference: PathBuf,
        /// reduced or full
        #[arg(long, default_value = "reduced")]
        mode: Mode,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        /// Report prefix; writes `<out>.json` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_mixed_config: bool,
    },
    /// Retrain with each stage count and report test-split metrics.
    AblateStages {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated stage counts, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        stages: Vec<usize>,
    },
}

fn locked<T>(cfg: &RunConfig, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    f()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyData { config } => {
            let cfg = config.load()?;
            let manifest = make_toy_data(&cfg)?;
            println!("wrote {} files to {} (sha256 {})", manifest.files.len(), cfg.data_dir.display(), manifest.sha256);
        }
        Command::PretrainSpatial { config, out } => {
            let cfg = config.load()?;
            let meta = locked(&cfg, || pretrain_spatial(&cfg, out.as_deref()))?;
            println!("{}", meta.checkpoint_hash);
        }
        Command::PretrainSpectral { config, out } => {
            let cfg = config.load()?;
            let meta = locked(&cfg, || pretrain_spectral(&cfg, out.as_deref()))?;
            println!("{}", meta.checkpoint_hash);
        }
        Command::Train { config, stage1, stage2, out, allow_mixed_config } => {
            let cfg = config.load()?;
            let opts = TrainOptions { stage1, stage2, out, allow_mixed_config, log_name: None };
            let outcome = locked(&cfg, || train(&cfg, &opts))?;
            println!("{}", outcome.meta.checkpoint_hash);
        }
        Command::Fuse { method, checkpoint, ratio, lrms, pan, input_dir, out } => {
            let fuser = Fuser::new(method, checkpoint.as_deref(), ratio)?;
            match (lrms, pan, input_dir) {
                (Some(lrms), Some(pan), None) => {
                    fuser.fuse_files(&lrms, &pan, &out)?;
                    println!("{}", out.display());
                }
                (None, None, Some(dir)) => {
                    let ids = fuser.fuse_dir(&dir, &out)?;
                    println!("fused {} images into {}", ids.len(), out.display());
                }
                _ => return Err(HarnessError::Usage("give either --lrms and --pan, or --input-dir".into())),
            }
        }
        Command::Evaluate { fused, reference, mode, ratio, out, allow_mixed_config } => {
            let report = evaluate(&fused, &reference, mode, ratio, allow_mixed_config)?;
            let (json, _) = report.write(&out)?;
            print!("{}", report.to_csv());
            log::info!("report written to {}", json.display());
        }
        Command::AblateStages { config, stages } => {
            let cfg = config.load()?;
            let rows = locked(&cfg, || ablate_stages(&cfg, &stages))?;
            print!("{}", rows_to_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

