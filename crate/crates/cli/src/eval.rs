//! `eval`: score read predictions of a model on a corpus.

use std::path::{Path, PathBuf};

use clap::Args;
use ffb_core::dataset::{load_corpus, LoadMode};
use ffb_core::evaluation::{glitch_rate, ConstantPredictor, EvalMode, GlitchReport, OraclePredictor, Predictor};
use ffb_core::ffl::FflString;
use ffb_core::models::prop1::{build_prop1_model, default_c};
use ffb_core::models::SequenceModel;

use crate::gen::parse_standard;
use crate::{dataset_err, io_error, to_json, write_file, CliError};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// `oracle`, `constant[:SYMBOL]`, `prop1` or a checkpoint path.
    #[arg(long)]
    pub model: String,
    /// Corpus file to score.
    #[arg(long, conflicts_with = "standard")]
    pub data: Option<PathBuf>,
    /// Score a fixed evaluation set instead: in_distribution | sparse | dense.
    #[arg(long)]
    pub standard: Option<String>,
    /// Sequences drawn from `--standard` (default: the set's full size).
    #[arg(long)]
    pub count: Option<usize>,
    /// Sequence length of `--standard`.
    #[arg(long = "T", default_value_t = 512)]
    pub length: usize,
    #[arg(long, default_value_t = 2)]
    pub vocab: u8,
    /// clean | generative
    #[arg(long, default_value = "clean")]
    pub mode: String,
    /// Temperature constant of `--model prop1` (default depends on length).
    #[arg(long)]
    pub c: Option<f64>,
    /// Accept corpora whose reads disagree with memory.
    #[arg(long)]
    pub permissive: bool,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the dependency-length histogram as CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
}

pub fn parse_mode(s: &str) -> Result<EvalMode, CliError> {
    match s {
        "clean" => Ok(EvalMode::Clean),
        "generative" => Ok(EvalMode::Generative),
        _ => Err(CliError::Usage(format!("unknown mode {s:?} (clean | generative)"))),
    }
}

pub fn load_model(path: &Path) -> Result<SequenceModel<f32>, CliError> {
    let f = std::fs::File::open(path).map_err(io_error(path))?;
    SequenceModel::read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn corpus(a: &EvalArgs) -> Result<Vec<FflString>, CliError> {
    match (&a.data, &a.standard) {
        (Some(p), _) => {
            let mode = if a.permissive { LoadMode::Permissive } else { LoadMode::Strict };
            Ok(load_corpus(p, mode).map_err(dataset_err)?.sequences)
        }
        (None, Some(name)) => {
            let set = parse_standard(name)?;
            let count = a.count.unwrap_or(set.default_count());
            Ok(set.corpus(a.length, count, a.vocab).sequences)
        }
        (None, None) => Err(CliError::Usage("give --data or --standard".into())),
    }
}

pub fn evaluate(a: &EvalArgs, seqs: &[FflString]) -> Result<GlitchReport, CliError> {
    let mode = parse_mode(&a.mode)?;
    let vocab = seqs
        .iter()
        .filter_map(FflString::max_data_symbol)
        .max()
        .map_or(a.vocab, |m| a.vocab.max(m + 1));
    let t_max = seqs.iter().map(FflString::len).max().unwrap_or(0).max(4);
    let model: Box<dyn Predictor> = match a.model.as_str() {
        "oracle" => Box::new(OraclePredictor { data_vocab: vocab }),
        "prop1" => {
            let c = a.c.unwrap_or_else(|| default_c(t_max));
            Box::new(build_prop1_model(c, t_max).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        m if m == "constant" || m.starts_with("constant:") => {
            let symbol = match m.strip_prefix("constant:") {
                Some(s) => s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad constant symbol {s:?}")))?,
                None => 0,
            };
            Box::new(ConstantPredictor {
                symbol,
                data_vocab: vocab.max(symbol + 1),
            })
        }
        path => Box::new(load_model(Path::new(path))?),
    };
    glitch_rate(model.as_ref(), seqs, mode).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let seqs = corpus(a)?;
    let report = evaluate(a, &seqs)?;
    if let Some(p) = &a.out {
        write_file(p, to_json(&report))?;
    }
    if let Some(p) = &a.histogram {
        write_file(p, report.histogram_csv())?;
    }
    outln!(
        "sequences {}  reads {}  errors {}  rate {}",
        seqs.len(),
        report.n_read_predictions,
        report.n_errors,
        report.error_rate
    );
    Ok(())
}
