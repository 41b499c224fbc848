//! Read-error measurement, replicate statistics and attention diagnostics.
//!
//! # `GlitchReport` JSON
//!
//! ```json
//! {"n_read_predictions": 354000, "n_errors": 3, "error_rate": 8.47e-6,
//!  "dependency_histogram": {"41": 1, "310": 2},
//!  "first_error": [null, 17, ...],
//!  "errors": [{"sequence": 1, "position": 17, "dependency": 41, "expected": 0, "predicted": 1}]}
//! ```
//!
//! `position` is the 0-indexed location of the `r` token; `predicted` is
//! `null` when a generative-mode prediction was not a data symbol.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::dependency_length;
use crate::ffl::{self, FflString, Token, NUM_INSTRUCTIONS};
use crate::models::prop1::Prop1Construction;
use crate::models::{AttentionRecord, ModelError, SequenceModel};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("corpus uses data symbol {symbol} but the model vocabulary holds {data_classes} data classes")]
    Vocab { symbol: u8, data_classes: usize },
    #[error("replicate statistics need at least one rate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Clean,
    Generative,
}

/// Anything that maps token sequences to next-token logits.
pub trait Predictor: Sync {
    fn vocab(&self) -> usize;

    /// Logits `[T, vocab]` per sequence; row `t` scores token `t + 1`.
    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError>;

    /// Sequences per call to [`Predictor::logits`].
    fn batch_size(&self) -> usize {
        32
    }
}

impl<F: Real> Predictor for SequenceModel<F> {
    fn vocab(&self) -> usize {
        self.config.vocab()
    }

    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError> {
        let idx: Vec<Vec<usize>> = batch.iter().map(|s| s.indices()).collect();
        let (out, _) = self.infer(&idx)?;
        Ok(out.iter().map(Tensor::cast).collect())
    }
}

impl Predictor for Prop1Construction {
    fn vocab(&self) -> usize {
        ffl::vocab_size(2)
    }

    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError> {
        batch
            .iter()
            .map(|s| Prop1Construction::logits(self, s.tokens()).map_err(EvalError::from))
            .collect()
    }

    fn batch_size(&self) -> usize {
        1
    }
}

fn one_hot_rows(tokens: &[Token], vocab: usize, pick: impl Fn(usize) -> Option<usize>) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[tokens.len(), vocab]);
    for i in 0..tokens.len() {
        if let Some(c) = pick(i) {
            t.data_mut()[i * vocab + c] = 1.0;
        }
    }
    t
}

/// Reference predictor that answers every read from the flip-flop memory.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub data_vocab: u8,
}

impl Predictor for OraclePredictor {
    fn vocab(&self) -> usize {
        ffl::vocab_size(self.data_vocab)
    }

    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError> {
        Ok(batch
            .iter()
            .map(|s| {
                let toks = s.tokens();
                let mut memory = vec![None; toks.len()];
                let mut m = None;
                for (i, pair) in toks.chunks(2).enumerate() {
                    if let (Token::Write, Some(Token::Data(v))) = (pair[0], pair.get(1)) {
                        m = Some(*v);
                    }
                    memory[2 * i] = m;
                }
                one_hot_rows(toks, self.vocab(), |i| match toks[i] {
                    Token::Read => memory[i].map(|v| Token::Data(v).index()),
                    _ => None,
                })
            })
            .collect())
    }

    fn batch_size(&self) -> usize {
        256
    }
}

/// Always predicts the same data symbol.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor {
    pub symbol: u8,
    pub data_vocab: u8,
}

impl Predictor for ConstantPredictor {
    fn vocab(&self) -> usize {
        ffl::vocab_size(self.data_vocab)
    }

    fn logits(&self, batch: &[&FflString]) -> Result<Vec<Tensor<f64>>, EvalError> {
        let c = Token::Data(self.symbol).index();
        Ok(batch
            .iter()
            .map(|s| one_hot_rows(s.tokens(), self.vocab(), |_| Some(c)))
            .collect())
    }

    fn batch_size(&self) -> usize {
        256
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadError {
    pub sequence: usize,
    pub position: usize,
    pub dependency: usize,
    pub expected: u8,
    pub predicted: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlitchReport {
    pub n_read_predictions: u64,
    pub n_errors: u64,
    pub error_rate: f64,
    pub dependency_histogram: BTreeMap<usize, u64>,
    /// Per sequence, the position of its first wrong read.
    pub first_error: Vec<Option<usize>>,
    pub errors: Vec<ReadError>,
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Decoded prediction at one position: `Some(symbol)` or `None` for a
/// non-data generative prediction.
pub fn decode(row: &[f64], mode: EvalMode) -> Option<u8> {
    match mode {
        EvalMode::Clean => Some(argmax(&row[NUM_INSTRUCTIONS..]) as u8),
        EvalMode::Generative => match Token::from_index(argmax(row)) {
            Some(Token::Data(v)) => Some(v),
            _ => None,
        },
    }
}

/// Errors bucketed by dependency length.
pub fn dependency_length_errors(errors: &[ReadError]) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    for e in errors {
        *h.entry(e.dependency).or_insert(0) += 1;
    }
    h
}

fn score_sequence(seq_index: usize, s: &FflString, logits: &Tensor<f64>, mode: EvalMode) -> (u64, Vec<ReadError>) {
    let toks = s.tokens();
    let mut reads = 0;
    let mut errors = Vec::new();
    let mut memory = None;
    for (i, t) in toks.iter().enumerate() {
        match t {
            Token::Write => {
                if let Some(Token::Data(v)) = toks.get(i + 1) {
                    memory = Some(*v);
                }
            }
            Token::Read => {
                let Some(expected) = memory else { continue };
                reads += 1;
                let predicted = decode(logits.row(i), mode);
                if predicted != Some(expected) {
                    errors.push(ReadError {
                        sequence: seq_index,
                        position: i,
                        dependency: dependency_length(toks, i),
                        expected,
                        predicted,
                    });
                }
            }
            _ => {}
        }
    }
    (reads, errors)
}

/// Scores every read of every sequence. Sequences are processed in parallel
/// chunks and merged in order, so the report does not depend on scheduling.
pub fn glitch_rate<P: Predictor + ?Sized>(
    model: &P,
    corpus: &[FflString],
    mode: EvalMode,
) -> Result<GlitchReport, EvalError> {
    let data_classes = model.vocab().saturating_sub(NUM_INSTRUCTIONS);
    if let Some(symbol) = corpus.iter().filter_map(FflString::max_data_symbol).max() {
        if usize::from(symbol) >= data_classes {
            return Err(EvalError::Vocab { symbol, data_classes });
        }
    }
    let bs = model.batch_size().max(1);
    let chunks: Vec<(usize, &[FflString])> = corpus.chunks(bs).enumerate().map(|(k, c)| (k * bs, c)).collect();
    let parts: Vec<(u64, Vec<ReadError>)> = chunks
        .par_iter()
        .map(|&(offset, chunk)| {
            let refs: Vec<&FflString> = chunk.iter().collect();
            let logits = model.logits(&refs)?;
            let mut reads = 0;
            let mut errors = Vec::new();
            for (k, (s, l)) in chunk.iter().zip(&logits).enumerate() {
                let (r, e) = score_sequence(offset + k, s, l, mode);
                reads += r;
                errors.extend(e);
            }
            Ok((reads, errors))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut n_reads = 0;
    let mut errors = Vec::new();
    for (r, e) in parts {
        n_reads += r;
        errors.extend(e);
    }
    let mut first_error = vec![None; corpus.len()];
    for e in &errors {
        first_error[e.sequence].get_or_insert(e.position);
    }
    let n_errors = errors.len() as u64;
    Ok(GlitchReport {
        n_read_predictions: n_reads,
        n_errors,
        error_rate: if n_reads == 0 { 0.0 } else { n_errors as f64 / n_reads as f64 },
        dependency_histogram: dependency_length_errors(&errors),
        first_error,
        errors,
    })
}

impl GlitchReport {
    /// `dependency,errors` rows.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("dependency,errors\n");
        for (d, n) in &self.dependency_histogram {
            s.push_str(&format!("{d},{n}\n"));
        }
        s
    }
}

/// Nearest-rank order statistics of per-run error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStats {
    pub n: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub zero_runs: usize,
}

/// Nearest-rank quantile of sorted data: element `ceil(q n)` (1-indexed),
/// with `q = 0` giving the minimum.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn replicate_stats(rates: &[f64]) -> Result<ReplicateStats, EvalError> {
    if rates.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut s = rates.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(ReplicateStats {
        n: s.len(),
        min: s[0],
        q25: nearest_rank(&s, 0.25),
        median: nearest_rank(&s, 0.5),
        q75: nearest_rank(&s, 0.75),
        max: s[s.len() - 1],
        zero_runs: s.iter().filter(|&&r| r == 0.0).count(),
    })
}

impl ReplicateStats {
    pub const CSV_HEADER: &'static str = "n,min,q25,median,q75,max,zero_runs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n, self.min, self.q25, self.median, self.q75, self.max, self.zero_runs
        )
    }
}

/// Per layer, head and row: `(argmax position, weight)`, ties to the lowest.
pub fn attention_argmax_map(record: &AttentionRecord) -> Vec<Vec<Vec<(usize, f64)>>> {
    record
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| {
                    (0..a.rows())
                        .map(|i| {
                            let j = argmax(a.row(i));
                            (j, a.at(i, j))
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Per layer, the symmetric matrix of Frobenius distances between heads.
pub fn head_pairwise_l2(record: &AttentionRecord) -> Vec<Vec<Vec<f64>>> {
    record
        .layers
        .iter()
        .map(|heads| {
            let h = heads.len();
            let mut m = vec![vec![0.0; h]; h];
            for a in 0..h {
                for b in a + 1..h {
                    let d = heads[a]
                        .data()
                        .iter()
                        .zip(heads[b].data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    m[a][b] = d;
                    m[b][a] = d;
                }
            }
            m
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSparsity {
    pub mean_entropy: f64,
    pub mean_max: f64,
    pub rows: usize,
}

/// Row entropy and max weight per head, averaged over rows whose causal
/// support has at least two entries.
pub fn row_sparsity(record: &AttentionRecord) -> Vec<Vec<HeadSparsity>> {
    record
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| {
                    let mut h = 0.0;
                    let mut mx = 0.0;
                    let mut rows = 0;
                    for i in 0..a.rows() {
                        let s = (i + 1).min(a.cols());
                        if s < 2 {
                            continue;
                        }
                        let row = &a.row(i)[..s];
                        h -= row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                        mx += row.iter().copied().fold(0.0, f64::max);
                        rows += 1;
                    }
                    let n = rows.max(1) as f64;
                    HeadSparsity {
                        mean_entropy: h / n,
                        mean_max: mx / n,
                        rows,
                    }
                })
                .collect()
        })
        .collect()
}

/// Mean row entropy over all heads, layers and sequences.
pub fn mean_attention_entropy<F: Real>(model: &SequenceModel<F>, corpus: &[FflString]) -> Result<f64, EvalError> {
    let parts: Vec<(f64, usize)> = corpus
        .par_chunks(16)
        .map(|chunk| {
            let idx: Vec<Vec<usize>> = chunk.iter().map(FflString::indices).collect();
            let (_, records) = model.infer(&idx)?;
            let mut total = 0.0;
            let mut rows = 0;
            for r in &records {
                for hs in row_sparsity(r).iter().flatten() {
                    total += hs.mean_entropy * hs.rows as f64;
                    rows += hs.rows;
                }
            }
            Ok((total, rows))
        })
        .collect::<Result<_, EvalError>>()?;
    let (t, r) = parts.iter().fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    Ok(if r == 0 { 0.0 } else { t / r as f64 })
}
