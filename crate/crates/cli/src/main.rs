use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carm_core::navigation::parse_paths;
use carm_core::pipeline::{self, AblationKind, PipelineConfig};
use carm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "carm",
    version,
    about = "Synthetic C-arm landmark positioning with calibrated uncertainty"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config, or any stage manifest to replay its config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; also the default location of stage inputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate patients and the train/calibration/test datasets.
    Gen,
    /// Train a regressor on `<data>/train.bin`.
    Train {
        /// Directory holding the generated datasets [default: --out].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compute conformal quantiles on the calibration set.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Calibration dataset [default: <out>/calibration.bin].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated miscoverage levels, e.g. "0.1,0.05,0.03".
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Report distance, NLL and coverage on the test set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Test dataset [default: <out>/test.bin].
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Compare multi-step positioning paths on the test patients.
    Navigate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        patients: Option<PathBuf>,
        /// Semicolon-separated paths of landmark ids, e.g. "1;11-10-1".
        #[arg(long)]
        paths: Option<String>,
        /// Replace the model with an exact stub.
        #[arg(long)]
        oracle: bool,
    },
    /// Retrain across a lambda or augmentation grid and tabulate the metrics.
    Ablate {
        /// `lambda` or `augmentation`
        kind: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn or_out(p: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| out.join(name))
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    let manifest = match cli.command {
        Command::Gen => pipeline::run_gen(&cfg, out)?,
        Command::Train { data, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            pipeline::run_train(&cfg, &data.unwrap_or_else(|| out.to_path_buf()), out)?
        }
        Command::Calibrate {
            checkpoint,
            data,
            alphas,
        } => {
            if let Some(a) = alphas {
                cfg.conformal.alphas = pipeline::parse_alphas(&a)?;
            }
            pipeline::run_calibrate(
                &cfg,
                &or_out(checkpoint, out, pipeline::CHECKPOINT_FILE),
                &or_out(data, out, pipeline::CALIBRATION_FILE),
                out,
            )?
        }
        Command::Eval {
            checkpoint,
            table,
            data,
            alphas,
        } => {
            if let Some(a) = alphas {
                cfg.conformal.alphas = pipeline::parse_alphas(&a)?;
            }
            pipeline::run_eval(
                &cfg,
                &or_out(checkpoint, out, pipeline::CHECKPOINT_FILE),
                &or_out(table, out, pipeline::TABLE_FILE),
                &or_out(data, out, pipeline::TEST_FILE),
                out,
            )?
        }
        Command::Navigate {
            checkpoint,
            table,
            patients,
            paths,
            oracle,
        } => {
            if let Some(p) = paths {
                cfg.navigation.paths = parse_paths(&p)?;
            }
            cfg.navigation.oracle |= oracle;
            let checkpoint = or_out(checkpoint, out, pipeline::CHECKPOINT_FILE);
            pipeline::run_navigate(
                &cfg,
                Some(checkpoint.as_path()),
                &or_out(table, out, pipeline::TABLE_FILE),
                &or_out(patients, out, pipeline::PATIENTS_FILE),
                out,
            )?
        }
        Command::Ablate { kind, epochs } => {
            let kind: AblationKind = kind.parse()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            pipeline::run_ablate(&cfg, kind, out)?
        }
    };
    for a in &manifest.artifacts {
        println!("{}  {}", a.sha256, out.join(&a.file).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
