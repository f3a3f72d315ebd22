use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use devfuse::commands::{
    cmd_calibrate, cmd_eval, cmd_generate, cmd_predict, cmd_train, predictions_path,
};
use devfuse::config::RunConfig;
use devfuse::data::Partition;
use devfuse::Error;

#[derive(Parser)]
#[command(name = "devfuse", version, about = "Probabilistic PCE regression from crystal graphs and device text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (devices, structures, ground truth).
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Metrics and predictions CSV for one split part.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Partition,
        /// Predictions CSV; the metrics JSON is written beside it.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Predict mu and sigma for a devices file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Devices JSONL; defaults to `data.devices`.
        #[arg(long, value_name = "PATH")]
        devices: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Binned |error| vs sigma table from a predictions CSV.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Predictions CSV with y_true, mu, sigma columns.
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric(_)
        | Error::Dimension { .. }
        | Error::Domain { .. }
        | Error::DegenerateMask
        | Error::Degenerate(_) => 4,
        _ => 3,
    }
}

fn load(common: &Common) -> devfuse::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        if let Some(spec) = cfg.synthetic.as_mut() {
            spec.seed = s;
        }
    }
    Ok(cfg)
}

fn or_default(p: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    p.unwrap_or_else(default)
}

fn run(cli: Cli) -> devfuse::Result<()> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&load(&common)?),
        Command::Train { common } => cmd_train(&load(&common)?).map(|_| ()),
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = load(&common)?;
            let ckpt = or_default(checkpoint, || cfg.checkpoint_path());
            let out = or_default(out, || predictions_path(&cfg, split));
            let res = cmd_eval(&cfg, &ckpt, split, &out)?;
            println!("{}", serde_json::to_string_pretty(&res.metrics)?);
            Ok(())
        }
        Command::Predict {
            common,
            checkpoint,
            devices,
            out,
        } => {
            let cfg = load(&common)?;
            let ckpt = or_default(checkpoint, || cfg.checkpoint_path());
            let devices = or_default(devices, || cfg.data.devices.clone());
            let out = or_default(out, || cfg.output.dir.join("predict.csv"));
            let (rows, dropped) = cmd_predict(&cfg, &ckpt, &devices, &out)?;
            log::info!("{} predictions, {} unresolved", rows.len(), dropped.len());
            Ok(())
        }
        Command::Calibrate {
            common,
            input,
            bins,
            out,
        } => {
            let cfg = load(&common)?;
            let input = or_default(input, || predictions_path(&cfg, Partition::Test));
            let out = or_default(out, || with_suffix(&input, "_calibration.csv"));
            let (table, coverage) = cmd_calibrate(&input, bins, &out)?;
            let inside = table.iter().filter(|b| b.theory_inside_ci()).count();
            println!("picp_95 {coverage:.4}; theory inside CI for {inside} of {} bins", table.len());
            Ok(())
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    p.with_file_name(format!("{stem}{suffix}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
