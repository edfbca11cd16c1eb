//! `inrprop` command-line front end.
//!
//! Machine-readable output goes to stdout or files; progress and diagnostics
//! go to stderr. Exit codes: 0 ok, 2 bad input, 3 numerical divergence,
//! 4 internal error.

use std::fmt::Display;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use inrprop::Error;
use serde::Serialize;

mod commands;
pub mod config;

pub use config::RunConfig;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "inrprop", version, about = "Fit feature and flow fields, propagate annotations, score them")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "INRPROP_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a spatiotemporal feature field to a feature volume.
    FitFeatures(commands::fit::FitFeaturesArgs),
    /// Fit a displacement field between two frames.
    FitFlow(commands::fit::FitFlowArgs),
    /// Transfer a point or mask annotation along a fitted pair.
    Propagate(commands::propagate::PropagateArgs),
    /// Score predictions against ground truth.
    Eval(commands::eval::EvalArgs),
    /// Write a synthetic feature volume.
    Synth(commands::synth::SynthArgs),
    /// Fit one field per activation under the same budget.
    CompareArch(commands::synth::CompareArchArgs),
}

/// `PATH` or `PATH:FRAME`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSpec {
    pub path: PathBuf,
    pub frame: Option<usize>,
}

impl FromStr for FrameSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(match s.rsplit_once(':') {
            Some((p, t)) if !p.is_empty() && t.parse::<usize>().is_ok() => FrameSpec {
                path: p.into(),
                frame: t.parse().ok(),
            },
            _ => FrameSpec {
                path: s.into(),
                frame: None,
            },
        })
    }
}

impl Display for FrameSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frame {
            Some(t) => write!(f, "{}:{t}", self.path.display()),
            None => write!(f, "{}", self.path.display()),
        }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

/// One stderr line per completed tenth of the work.
pub(crate) struct Progress {
    label: &'static str,
    total: usize,
    next: usize,
}

impl Progress {
    pub(crate) fn new(label: &'static str, total: usize) -> Self {
        Progress {
            label,
            total: total.max(1),
            next: 1,
        }
    }

    pub(crate) fn tick(&mut self, done: usize, detail: impl Display) {
        let decile = done * 10 / self.total;
        if decile >= self.next {
            eprintln!("{}: {:>3}% ({done}/{}) {detail}", self.label, decile * 10, self.total);
            self.next = decile + 1;
        }
    }
}

pub(crate) fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

/// `target` as seen from the directory of `doc`, when it lies below it.
pub(crate) fn relative_ref(target: &Path, doc: &Path) -> String {
    let base = doc.parent().unwrap_or(Path::new(""));
    target
        .strip_prefix(base)
        .unwrap_or(target)
        .to_string_lossy()
        .into_owned()
}

/// Resolves a reference stored in a document relative to that document.
pub(crate) fn resolve_ref(reference: &str, doc: &Path) -> PathBuf {
    doc.parent().unwrap_or(Path::new("")).join(reference)
}

pub fn run(cli: Cli) -> inrprop::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::FitFeatures(a) => {
            a.apply(&mut cfg);
            commands::fit::fit_features(&a, &finish(cfg)?)
        }
        Command::FitFlow(a) => {
            a.apply(&mut cfg);
            commands::fit::fit_flow(&a, &finish(cfg)?)
        }
        Command::Propagate(a) => {
            a.apply(&mut cfg);
            commands::propagate::propagate(&a, &finish(cfg)?)
        }
        Command::Eval(a) => commands::eval::eval(&a, &finish(cfg)?),
        Command::Synth(a) => commands::synth::synth(&a, &finish(cfg)?),
        Command::CompareArch(a) => {
            a.apply(&mut cfg);
            commands::synth::compare_arch(&a, &finish(cfg)?)
        }
    }
}

fn finish(cfg: RunConfig) -> inrprop::Result<RunConfig> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

/// Entry point of the `inrprop` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    }
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
