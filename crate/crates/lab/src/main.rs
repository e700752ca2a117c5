use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use dptq_core::train::PairMode;
use dptq_lab::commands::{self, Analysis};
use dptq_lab::config::RunConfig;
use dptq_lab::LabError;

#[derive(Parser)]
#[command(name = "dptq", version, about = "Dynamic quantization robustness laboratory")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the configuration file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, created if missing.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the black-box teacher with cross entropy.
    TrainTeacher,
    /// Distill f_N from the teacher through query access only.
    Distill {
        /// Teacher checkpoint (default: <out>/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Finetune a robust or detrimental student with its bit-width policy.
    TrainPair {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Starting network (default: <out>/f_n.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Run a diagnostic on trained checkpoints.
    Analyze {
        #[arg(value_enum)]
        analysis: AnalysisArg,
        /// Directory holding f_n, f_r, f_d, pi_r and pi_d (default: <out>).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train every (version, budget) cell of the grid and tabulate it.
    ReproduceGrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Robust,
    Detrimental,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalysisArg {
    Swap,
    Transitory,
    Sweep,
    Histograms,
    Perturb,
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out.as_path();
    let summary = match cli.command {
        Command::TrainTeacher => commands::train_teacher(cfg, out)?,
        Command::Distill { teacher } => commands::distill(cfg, out, teacher.as_deref())?,
        Command::TrainPair { mode, base } => {
            let mode = match mode {
                ModeArg::Robust => PairMode::Robust,
                ModeArg::Detrimental => PairMode::Detrimental,
            };
            commands::train_pair(cfg, out, mode, base.as_deref())?
        }
        Command::Analyze { analysis, run } => {
            let which = match analysis {
                AnalysisArg::Swap => Analysis::Swap,
                AnalysisArg::Transitory => Analysis::Transitory,
                AnalysisArg::Sweep => Analysis::Sweep,
                AnalysisArg::Histograms => Analysis::Histograms,
                AnalysisArg::Perturb => Analysis::Perturb,
            };
            commands::analyze(cfg, out, which, run.as_deref())
                .with_context(|| format!("analyze {}", which.name()))?
        }
        Command::ReproduceGrid => commands::reproduce_grid(cfg, out)?,
    };
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<LabError>().map_or(1, LabError::exit_code);
            ExitCode::from(code)
        }
    }
}
