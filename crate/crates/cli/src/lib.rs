//! Command-line driver for corpus generation, training, evaluation and trace
//! export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error,
//! 3 corrupt checkpoint, 4 incompatible checkpoint, 5 unknown task id.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use segrl_core::eval::ControllerMode;
use segrl_core::optimize::{Ablations, EvalDecoding};

use config::{FileConfig, ReasonerKind};

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn unknown_task(id: &str) -> Self {
        Failure { code: 5, message: format!("unknown task id {id:?}") }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<segrl_core::Error> for Failure {
    fn from(e: segrl_core::Error) -> Self {
        use segrl_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Usage(_) | E::Parse { .. } => 2,
            E::CorruptCheckpoint(_) => 3,
            E::IncompatibleCheckpoint(_) => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "segrl", version, about = "Segment-selective time-series QA with controller/reasoner self-play")]
pub struct Cli {
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; sections gen, env, train, eval.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (1 = sequential, 0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-task corpus.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Corpus file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared policy; writes metrics and checkpoints into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an untrained policy) on a corpus.
    Eval(EvalArgs),
    /// Play one task and export a readable dump plus an interleaved trace.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out corpus for periodic and final evaluation.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    /// `none` or switch names joined by `+` or `,`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are done, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ControllerArg {
    Policy,
    Oracle,
    Uniform,
    FullSeries,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ReasonerArg {
    Policy,
    Oracle,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum DecodingArg {
    Sampled,
    Greedy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Omit to evaluate an all-zero policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    #[arg(long, value_enum)]
    pub reasoner: Option<ReasonerArg>,
    #[arg(long, value_enum)]
    pub decoding: Option<DecodingArg>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub reasoner: Option<ReasonerArg>,
    /// Probability of a deliberately malformed message per turn.
    #[arg(long)]
    pub corruption: Option<f64>,
}

impl Common {
    fn load(&self, env: &[(String, String)]) -> Result<FileConfig, Failure> {
        let mut cfg = FileConfig::load(self.config.as_deref(), env)?;
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn reasoner_kind(arg: ReasonerArg) -> ReasonerKind {
    match arg {
        ReasonerArg::Policy => ReasonerKind::Policy,
        ReasonerArg::Oracle => ReasonerKind::Oracle,
    }
}

/// Resolves the effective configuration of a parsed command line.
pub fn effective_config(command: &Command, env: &[(String, String)]) -> Result<FileConfig, Failure> {
    let cfg = match command {
        Command::Gen { common, count, .. } => {
            let mut cfg = common.load(env)?;
            if let Some(s) = common.seed {
                cfg.gen.seed = s;
            }
            if let Some(c) = count {
                cfg.gen.count = *c;
            }
            cfg
        }
        Command::Train(a) => {
            let mut cfg = a.common.load(env)?;
            if let Some(s) = a.common.seed {
                cfg.train.seed = s;
            }
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            if let Some(ab) = &a.ablation {
                cfg.train.ablations = Ablations::parse(ab)?;
            }
            cfg
        }
        Command::Eval(a) => {
            let mut cfg = a.common.load(env)?;
            if let Some(s) = a.common.seed {
                cfg.eval.seed = s;
            }
            if let Some(c) = a.controller {
                cfg.eval.controller = match c {
                    ControllerArg::Policy => ControllerMode::Policy,
                    ControllerArg::Oracle => ControllerMode::Oracle,
                    ControllerArg::Uniform => ControllerMode::Uniform,
                    ControllerArg::FullSeries => ControllerMode::FullSeries,
                };
            }
            if let Some(r) = a.reasoner {
                cfg.eval.reasoner = reasoner_kind(r);
            }
            if let Some(d) = a.decoding {
                cfg.eval.decoding = match d {
                    DecodingArg::Sampled => EvalDecoding::Sampled,
                    DecodingArg::Greedy => EvalDecoding::Greedy,
                };
            }
            cfg
        }
        Command::Trace(a) => {
            let mut cfg = a.common.load(env)?;
            if let Some(s) = a.common.seed {
                cfg.eval.seed = s;
            }
            if let Some(r) = a.reasoner {
                cfg.eval.reasoner = reasoner_kind(r);
            }
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first) and runs the command. `env` supplies
/// the `SEGRL_` overrides.
pub fn run<I, T>(args: I, env: &[(String, String)]) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::config(e.to_string())),
    };
    let cfg = effective_config(&cli.command, env)?;
    let (workers, quiet) = (cfg.workers, cli.quiet);
    segrl_core::exec::with_workers(workers, move || match &cli.command {
        Command::Gen { out, .. } => commands::gen(&cfg, out, quiet),
        Command::Train(a) => commands::train(&cfg, a, quiet),
        Command::Eval(a) => commands::eval(&cfg, a, quiet),
        Command::Trace(a) => commands::trace(&cfg, a, quiet),
    })
}
