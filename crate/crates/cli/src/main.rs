//! Command-line front end for the vlamcap captioner.
//!
//! Five subcommands cover the full workflow: `gen-data` builds the
//! synthetic corpus, `train` fits a model, `eval` scores a checkpoint on
//! the test split, `ground` captions one image and writes its localization
//! maps and boxes, and `ablate` runs the standard model-variant grid.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

mod commands;
mod config;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Failures split by exit code: usage errors are the caller's to fix
/// before anything ran, runtime errors happened mid-work.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn prefixed(self, context: &str) -> CliError {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{context}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{context}: {m}")),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<vlamcap::Error> for CliError {
    fn from(e: vlamcap::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "vlamcap",
    version,
    about = "Grounded image captioning without box supervision",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-scene corpus with caption and box truth.
    GenData(CommonArgs),
    /// Train a captioner on a generated corpus.
    Train(CommonArgs),
    /// Score a checkpoint on the corpus test split.
    Eval(CommonArgs),
    /// Caption one image; write per-word maps, boxes, and an overlay.
    Ground(CommonArgs),
    /// Train and score the standard ablation grid.
    Ablate(CommonArgs),
}

/// Flags shared by every subcommand. Anything not covered here is set
/// through the configuration file or `--set`.
#[derive(Args)]
struct CommonArgs {
    /// Key=value configuration file, applied before any overrides.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Single key=value override; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed for corpus, initialization, and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Continue training from the saved trainer state.
    #[arg(long)]
    resume: bool,
    /// Box-extraction threshold on the max-normalized map.
    #[arg(long)]
    rho: Option<f64>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for pair in &self.set {
            cfg.apply_pair(pair)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(rho) = self.rho {
            cfg.rho = rho;
        }
        cfg.force |= self.force;
        cfg.resume |= self.resume;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => commands::gen_data(&args.resolve()?),
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Eval(args) => commands::eval(&args.resolve()?),
        Command::Ground(args) => commands::ground(&args.resolve()?),
        Command::Ablate(args) => commands::ablate(&args.resolve()?),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let requested = matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if requested { 0 } else { 1 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
