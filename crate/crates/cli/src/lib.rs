//! Command-line orchestration for the MoNO benchmarks.
//!
//! Each subcommand resolves a [`RunConfig`], runs its pipeline stage under the
//! output root, and writes `<command>.config.txt` next to the results.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] mono_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bench", about = "Mixture-of-neural-operators benchmark driver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings follow the subcommand as `key=value`, `--key value` or `--key=value`.
#[derive(Debug, Clone, clap::Args)]
pub struct Settings {
    /// Config file applied before the command-line settings.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    pub settings: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the train/test dataset.
    Gen(Settings),
    /// Report projection errors of the configured basis on the dataset.
    Basis(Settings),
    /// Build the routing tree and audit it; `tree audit` re-audits the stored tree.
    Tree(Settings),
    /// Assemble and train the mixture.
    Train(Settings),
    /// Relative L² error of the trained mixture on both splits.
    Eval(Settings),
    /// Parameter and memory accounting of the trained mixture.
    Report(Settings),
    /// Trivial tree against multi-leaf mixtures over several seeds.
    Compare(Settings),
    /// Closed-form size budgets over a grid of precisions.
    Budget(Settings),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Basis(_) => "basis",
            Command::Tree(_) => "tree",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
            Command::Compare(_) => "compare",
            Command::Budget(_) => "budget",
        }
    }

    fn settings(&self) -> &Settings {
        match self {
            Command::Gen(s)
            | Command::Basis(s)
            | Command::Tree(s)
            | Command::Train(s)
            | Command::Eval(s)
            | Command::Report(s)
            | Command::Compare(s)
            | Command::Budget(s) => s,
        }
    }
}

/// Builds the configuration for `command`; returns the resolved config and
/// whether `tree audit` was requested.
pub fn resolve(command: &Command) -> Result<(RunConfig, bool), CliError> {
    let s = command.settings();
    let mut args = s.settings.clone();
    let audit_only = matches!(command, Command::Tree(_)) && args.first().map(String::as_str) == Some("audit");
    if audit_only {
        args.remove(0);
    }
    let mut cfg = RunConfig::default();
    let mut files = s.config.iter().cloned().collect::<Vec<_>>();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            files.push(it.next().ok_or_else(|| CliError::Config("missing value for --config".into()))?.into());
        } else if let Some(p) = a.strip_prefix("--config=") {
            files.push(p.into());
        } else {
            rest.push(a);
        }
    }
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_args(&rest)?;
    Ok((cfg, audit_only))
}

/// Runs one parsed command and returns what it prints on stdout.
pub fn execute(command: &Command) -> Result<String, CliError> {
    let (cfg, audit_only) = resolve(command)?;
    let root = cfg.out_dir();
    pipeline::create_dir(&root)?;
    pipeline::write_text(&root.join(format!("{}.config.txt", command.name())), &cfg.render())?;
    match command {
        Command::Gen(_) => pipeline::gen(&cfg, &root),
        Command::Basis(_) => pipeline::basis(&cfg, &root),
        Command::Tree(_) if audit_only => pipeline::tree_audit(&cfg, &root),
        Command::Tree(_) => pipeline::tree(&cfg, &root),
        Command::Train(_) => pipeline::train(&cfg, &root),
        Command::Eval(_) => pipeline::eval(&cfg, &root),
        Command::Report(_) => pipeline::report(&cfg, &root),
        Command::Compare(_) => pipeline::compare(&cfg, &root),
        Command::Budget(_) => pipeline::budget(&cfg, &root),
    }
}

/// Parses `argv` (program name first), runs it, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("bench {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
