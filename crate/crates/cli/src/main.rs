use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffloss_core::harness;
use diffloss_core::trainer::DEFAULT_GAMMAS;

#[derive(Parser)]
#[command(name = "diffloss", version, about = "Diffusion-prior auxiliary loss experiments on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy diffusion model.
    DdpmTrain {
        config: PathBuf,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a restoration network, then evaluate it.
    RestoreTrain {
        config: PathBuf,
        /// Force the auxiliary loss on or off (suffixes the run id).
        #[arg(long, value_enum)]
        diffloss: Option<Toggle>,
    },
    /// Recompute the metric report of a restoration run.
    Evaluate { run_dir: PathBuf },
    /// Perturb the bottleneck during regeneration and measure feature drift.
    HspaceProbe { config: PathBuf },
    /// Probe top-1 accuracy on restored, degraded and clean test images.
    ClassifyEval {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-by-side metrics and deltas against the baseline arm.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one restorer per loss weight.
    SweepGamma {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> diffloss_core::Result<PathBuf> {
    match cli.command {
        Command::DdpmTrain { config, resume } => harness::cmd_ddpm_train(&config, resume.as_deref()),
        Command::RestoreTrain { config, diffloss } => {
            harness::cmd_restore_train(&config, diffloss.map(|t| matches!(t, Toggle::On)))
        }
        Command::Evaluate { run_dir } => harness::cmd_evaluate(&run_dir),
        Command::HspaceProbe { config } => harness::cmd_hspace_probe(&config),
        Command::ClassifyEval { run_dirs, out } => harness::cmd_classify_eval(&run_dirs, out.as_deref()),
        Command::Report { run_dirs, out } => harness::cmd_report(&run_dirs, out.as_deref()),
        Command::SweepGamma { config, gammas } => {
            harness::cmd_sweep_gamma(&config, gammas.as_deref().unwrap_or(&DEFAULT_GAMMAS))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.as_str());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
