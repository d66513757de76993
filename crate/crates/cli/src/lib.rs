//! Command-line front end: configuration loading, experiment runs and
//! artifact output.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad flags, config or
//! input), 2 on a numerical failure or a failed verification verdict.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::ExperimentConfig;

/// `git describe`-style version baked in at build time.
pub const VERSION: &str = env!("MORPHWALK_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] morphwalk::Error),
    #[error("verification failed: {0}")]
    Verdict(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Verdict(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "morphwalk", version = VERSION, about = "BallWalk sampling on flow images of convex domains")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Primary artifact path; secondary artifacts are written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed (and the chain seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, env = "MORPHWALK_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or verify a transport map.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Run BallWalk chains.
    #[command(subcommand)]
    Sample(SampleCmd),
    /// Mixing, conductance, isoperimetry and oracle diagnostics.
    #[command(subcommand)]
    Diag(DiagCmd),
    /// Mixing report with conductance, iso and LS comparisons attached.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum FlowCmd {
    /// Integrate the flow and write the map archive.
    Build,
    /// Re-check the Jacobians stored in an archive.
    Verify {
        #[arg(long)]
        archive: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SampleCmd {
    /// Write chain trajectories as CSV.
    Run,
}

#[derive(Debug, Subcommand)]
pub enum DiagCmd {
    /// TV mixing curve against a rejection-sampling reference.
    Tv,
    /// Ergodic flow of half-space cuts.
    Flow,
    /// s-conductance scan over half-space cuts (an upper bound on Φ_s).
    Conductance,
    /// Isoperimetric sweep over random plane partitions.
    Iso,
    /// Exact small-chain enumeration.
    Oracle {
        /// Number of states of the path chain.
        #[arg(long)]
        states: Option<usize>,
    },
}

/// Parse `argv`, run the command and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run a parsed command; returns the artifact paths written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    if let Some(n) = cli.threads.filter(|n| *n > 0) {
        // the global pool can only be set once per process; results do not
        // depend on the thread count, so a second request is ignored
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (mut cfg, text) = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), String::new()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.chain.seed = None;
    }
    let ctx = commands::Context { cfg, text };
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match &cli.command {
        Command::Flow(FlowCmd::Build) => ctx.flow_build(&out("map.csv")),
        Command::Flow(FlowCmd::Verify { archive }) => ctx.flow_verify(archive, &out("verify.json")),
        Command::Sample(SampleCmd::Run) => ctx.sample_run(&out("samples.csv")),
        Command::Diag(DiagCmd::Tv) => ctx.diag_tv(&out("tv.json")),
        Command::Diag(DiagCmd::Flow) => ctx.diag_flow(&out("flow.json")),
        Command::Diag(DiagCmd::Conductance) => ctx.diag_conductance(&out("conductance.json")),
        Command::Diag(DiagCmd::Iso) => ctx.diag_iso(&out("iso.json")),
        Command::Diag(DiagCmd::Oracle { states }) => ctx.diag_oracle(*states, &out("oracle.json")),
        Command::Report => ctx.report(&out("report.json")),
    }
}
