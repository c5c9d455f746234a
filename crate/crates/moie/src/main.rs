use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moie::commands::{Command, Workspace};
use moie::config::RunConfig;
use moie::error::Result;

/// Carve a blackbox classifier into interpretable experts and a residual.
#[derive(Debug, Parser)]
#[command(name = "moie", version)]
struct Cli {
    /// Run configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Generate (or split) the dataset and save it as JSON lines.
    GenData,
    /// Train the blackbox head on embeddings.
    TrainBlackbox,
    /// Learn the concept bank and filter it.
    LearnConcepts,
    /// Carve experts, selectors and the residual.
    Carve,
    /// Extract FOL explanations and score their fidelity.
    Explain,
    /// Completeness score of all and of the top-attended concepts.
    Completeness,
    /// Zero-out ablation by attention and at random.
    Ablate,
    /// Replace predicted concepts with ground truth.
    Intervene,
    /// Detect and remove a metadata shortcut.
    Shortcut,
    /// CSV tables for coverage, iterations, attention and ablation.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainBlackbox => Command::TrainBlackbox,
            Cmd::LearnConcepts => Command::LearnConcepts,
            Cmd::Carve => Command::Carve,
            Cmd::Explain => Command::Explain,
            Cmd::Completeness => Command::Completeness,
            Cmd::Ablate => Command::Ablate,
            Cmd::Intervene => Command::Intervene,
            Cmd::Shortcut => Command::Shortcut,
            Cmd::Report => Command::Report,
        }
    }
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Workspace::new(cfg)?.run(cli.command.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                println!("{}", summary.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
