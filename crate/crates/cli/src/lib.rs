//! `ffb` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
//! 3 I/O error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ffb_core::dataset::DatasetError;
use thiserror::Error;

/// `print!` that ignores a closed stdout.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

pub mod attn;
pub mod config;
pub mod eval;
pub mod gen;
pub mod report;
pub mod run;
pub mod theory;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub(crate) fn dataset_err(e: DatasetError) -> CliError {
    match e {
        DatasetError::Io { .. } => CliError::Io(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    std::fs::write(path, contents).map_err(io_error(path))
}

pub(crate) fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Debug, Parser)]
#[command(name = "ffb", version, about = "Flip-flop language benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus and its .meta sidecar.
    Gen(gen::GenArgs),
    /// Train one model.
    Train(run::TrainArgs),
    /// Score read predictions on a corpus.
    Eval(eval::EvalArgs),
    /// Train a grid of configurations times replicates.
    Sweep(run::SweepArgs),
    /// Numerical checks of the attention results.
    Theory(theory::TheoryArgs),
    /// Export attention matrices for one input.
    AttnDump(attn::AttnArgs),
    /// Aggregate run directories into replicate statistics.
    Report(report::ReportArgs),
}

/// Config file plus the flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (config key `out_dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seed for both data and model streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    /// clean | generative
    #[arg(long)]
    pub mode: Option<String>,
    /// Ignore probability of the training distribution.
    #[arg(long)]
    pub p_i: Option<f64>,
    /// Comma-separated ignore probabilities of a uniform training mixture.
    #[arg(long, value_delimiter = ',')]
    pub mixture: Option<Vec<f64>>,
    /// Training sequence length.
    #[arg(long = "T")]
    pub length: Option<usize>,
    #[arg(long)]
    pub vocab: Option<u8>,
    /// Arbitrary override `dotted.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunFlags {
    pub fn seeds(&self) -> config::SeedFlags {
        config::SeedFlags {
            seed: self.seed,
            data_seed: self.data_seed,
            model_seed: self.model_seed,
        }
    }

    /// The config file as a TOML tree with every flag applied on top.
    pub fn config_tree(&self) -> Result<toml::Value, CliError> {
        let mut root = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_error(p))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::Value::Table(table)
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        use toml::Value as V;
        let mut put = |k: &str, v: Option<V>| -> Result<(), CliError> {
            match v {
                Some(v) => config::set_path(&mut root, k, v),
                None => Ok(()),
            }
        };
        put("out_dir", self.out_dir.as_ref().map(|p| V::String(p.display().to_string())))?;
        put("train.steps", self.steps.map(|v| V::Integer(v as i64)))?;
        put("train.batch_size", self.batch_size.map(|v| V::Integer(v as i64)))?;
        put("train.lr", self.lr.map(V::Float))?;
        put("train.warmup", self.warmup.map(|v| V::Integer(v as i64)))?;
        put("train.mode", self.mode.clone().map(V::String))?;
        put("data.p_i", self.p_i.map(V::Float))?;
        put(
            "data.mixture",
            self.mixture.as_ref().map(|m| V::Array(m.iter().map(|&x| V::Float(x)).collect())),
        )?;
        put("data.length", self.length.map(|v| V::Integer(v as i64)))?;
        put("data.vocab", self.vocab.map(|v| V::Integer(i64::from(v))))?;
        for s in &self.set {
            let (k, v) = config::parse_assignment(s)?;
            config::set_path(&mut root, &k, v)?;
        }
        Ok(root)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => gen::cmd_gen(&a),
        Command::Train(a) => run::cmd_train(&a),
        Command::Eval(a) => eval::cmd_eval(&a),
        Command::Sweep(a) => run::cmd_sweep(&a),
        Command::Theory(a) => theory::cmd_theory(&a),
        Command::AttnDump(a) => attn::cmd_attn_dump(&a),
        Command::Report(a) => report::cmd_report(&a),
    }
}
