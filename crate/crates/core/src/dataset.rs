//! Corpus generation, the on-disk text format, provenance sidecars and
//! corpus statistics.
//!
//! # Corpus file
//!
//! 7-bit ASCII, one sequence per line, token characters concatenated with no
//! separators (`w`, `r`, `i`, `0`-`9`), every line terminated by `\n`.
//!
//! # `.meta` sidecar
//!
//! Same basename plus `.meta`, one `key=value` per line, no header:
//!
//! ```text
//! split=train
//! count=1000
//! master_seed=1
//! components=1
//! component.0.weight=1
//! component.0.length=512
//! component.0.p_write=0.1
//! component.0.p_read=0.1
//! component.0.p_ignore=0.8
//! component.0.vocab=2
//! ```
//!
//! Floats use the shortest representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ffl::{self, FflError, FflParams, FflString, ReadValidity, Token};
use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line} is truncated (missing newline terminator)")]
    Truncated { line: usize },
    #[error("line {line}: read violation at position {position}")]
    ReadViolation { line: usize, position: usize },
    #[error("invalid metadata: {0}")]
    Meta(String),
}

impl From<FflError> for DatasetError {
    fn from(e: FflError) -> Self {
        DatasetError::InvalidSpec(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub params: FflParams,
}

/// Recipe for a corpus: a (possibly single-component) mixture of FFL
/// distributions, a size and a master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub components: Vec<Component>,
    pub count: usize,
    pub master_seed: u64,
    pub split: String,
}

impl DatasetSpec {
    pub fn single(params: FflParams, count: usize, master_seed: u64, split: &str) -> Self {
        Self {
            components: vec![Component {
                weight: 1.0,
                params,
            }],
            count,
            master_seed,
            split: split.to_string(),
        }
    }

    /// Uniform mixture over the given parameter sets.
    pub fn uniform_mixture(params: &[FflParams], count: usize, master_seed: u64, split: &str) -> Self {
        let w = 1.0 / params.len() as f64;
        Self {
            components: params.iter().map(|&p| Component { weight: w, params: p }).collect(),
            count,
            master_seed,
            split: split.to_string(),
        }
    }

    pub fn is_mixture(&self) -> bool {
        self.components.len() > 1
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        let Some(first) = self.components.first() else {
            return bad("no mixture components".into());
        };
        let mut total = 0.0;
        for c in &self.components {
            c.params.validate()?;
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return bad(format!("mixture weight {} must be positive", c.weight));
            }
            if c.params.length != first.params.length {
                return bad("mixture components must share a sequence length".into());
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {total}"));
        }
        if self.split.contains('\n') {
            return bad("split label must be a single line".into());
        }
        Ok(())
    }

    pub fn length(&self) -> usize {
        self.components[0].params.length
    }

    pub fn vocab(&self) -> u8 {
        self.components.iter().map(|c| c.params.vocab).max().unwrap_or(2)
    }

    /// Sequence `index` of this spec.
    ///
    /// The generator is seeded with `derive_seed(master_seed, index)`. For
    /// mixtures one `u32` output picks the component before sampling.
    pub fn sample_index(&self, index: u64) -> FflString {
        let mut rng = rng::pcg(rng::derive_seed(self.master_seed, index));
        let params = if self.is_mixture() {
            let u = rng::unit_f64(&mut rng);
            let mut acc = 0.0;
            let mut chosen = &self.components[self.components.len() - 1].params;
            for c in &self.components {
                acc += c.weight;
                if u < acc {
                    chosen = &c.params;
                    break;
                }
            }
            chosen
        } else {
            &self.components[0].params
        };
        ffl::sample_with_rng(params, &mut rng)
    }

    pub fn to_meta(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("split={}\n", self.split));
        out.push_str(&format!("count={}\n", self.count));
        out.push_str(&format!("master_seed={}\n", self.master_seed));
        out.push_str(&format!("components={}\n", self.components.len()));
        for (i, c) in self.components.iter().enumerate() {
            let p = &c.params;
            out.push_str(&format!("component.{i}.weight={}\n", c.weight));
            out.push_str(&format!("component.{i}.length={}\n", p.length));
            out.push_str(&format!("component.{i}.p_write={}\n", p.p_write));
            out.push_str(&format!("component.{i}.p_read={}\n", p.p_read));
            out.push_str(&format!("component.{i}.p_ignore={}\n", p.p_ignore));
            out.push_str(&format!("component.{i}.vocab={}\n", p.vocab));
        }
        out
    }

    pub fn from_meta(text: &str) -> Result<Self, DatasetError> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DatasetError::Meta(format!("line {} has no '='", n + 1)))?;
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(DatasetError::Meta(format!("duplicate key {k}")));
            }
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| DatasetError::Meta(format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T, DatasetError> {
            v.parse()
                .map_err(|_| DatasetError::Meta(format!("bad value for {k}: {v:?}")))
        }
        let split = take("split")?;
        let count = num("count", take("count")?)?;
        let master_seed = num("master_seed", take("master_seed")?)?;
        let n: usize = num("components", take("components")?)?;
        let mut components = Vec::with_capacity(n);
        for i in 0..n {
            let mut field = |f: &str| {
                let key = format!("component.{i}.{f}");
                take(&key).map(|v| (key, v))
            };
            let (k, v) = field("weight")?;
            let weight = num(&k, v)?;
            let (k, v) = field("length")?;
            let length = num(&k, v)?;
            let (k, v) = field("p_write")?;
            let p_write = num(&k, v)?;
            let (k, v) = field("p_read")?;
            let p_read = num(&k, v)?;
            let (k, v) = field("p_ignore")?;
            let p_ignore = num(&k, v)?;
            let (k, v) = field("vocab")?;
            let vocab = num(&k, v)?;
            components.push(Component {
                weight,
                params: FflParams {
                    length,
                    p_write,
                    p_read,
                    p_ignore,
                    vocab,
                },
            });
        }
        if let Some(k) = kv.keys().next() {
            return Err(DatasetError::Meta(format!("unknown key {k}")));
        }
        let spec = Self {
            components,
            count,
            master_seed,
            split,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A list of flip-flop strings plus the recipe that produced them, if known.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<FflString>,
    pub provenance: Option<DatasetSpec>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// First `n` sequences (used for the subsampled evaluation during training).
    pub fn head(&self, n: usize) -> Corpus {
        Corpus {
            sequences: self.sequences.iter().take(n).cloned().collect(),
            provenance: None,
        }
    }

    /// First read violation as `(0-indexed sequence, 1-indexed position)`.
    pub fn first_violation(&self) -> Option<(usize, usize)> {
        self.sequences
            .iter()
            .enumerate()
            .find_map(|(i, s)| match s.validate_reads() {
                ReadValidity::Valid => None,
                ReadValidity::Violation { position } => Some((i, position)),
            })
    }

    pub fn to_text(&self) -> String {
        let width = self.sequences.first().map_or(0, |s| s.len() + 1);
        let mut out = String::with_capacity(width * self.sequences.len());
        for s in &self.sequences {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }
}

/// Generates `spec.count` sequences; sequence `i` depends only on `(spec, i)`.
pub fn generate_corpus(spec: &DatasetSpec) -> Result<Corpus, DatasetError> {
    spec.validate()?;
    let sequences = (0..spec.count as u64)
        .into_par_iter()
        .map(|i| spec.sample_index(i))
        .collect();
    Ok(Corpus {
        sequences,
        provenance: Some(spec.clone()),
    })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

/// Writes the corpus and, when provenance is known, its `.meta` sidecar.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for s in &corpus.sequences {
        writeln!(w, "{s}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    if let Some(spec) = &corpus.provenance {
        let meta = meta_path(path);
        fs::write(&meta, spec.to_meta()).map_err(io_err(&meta))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Reject sequences whose reads disagree with memory.
    #[default]
    Strict,
    /// Accept structurally valid sequences regardless of read correctness.
    Permissive,
}

pub fn parse_corpus(text: &str, mode: LoadMode) -> Result<Vec<FflString>, DatasetError> {
    let mut sequences = Vec::new();
    if text.is_empty() {
        return Ok(sequences);
    }
    let lines: Vec<&str> = text.split('\n').collect();
    // `split` yields a trailing empty piece iff the text ends with '\n'.
    let (last, complete) = lines.split_last().expect("non-empty");
    if !last.is_empty() {
        return Err(DatasetError::Truncated { line: lines.len() });
    }
    for (n, line) in complete.iter().enumerate() {
        let line_no = n + 1;
        let parse_err = |column: usize, message: String| DatasetError::Parse {
            line: line_no,
            column,
            message,
        };
        let mut tokens = Vec::with_capacity(line.len());
        for (c, ch) in line.chars().enumerate() {
            let tok = Token::from_char(ch)
                .ok_or_else(|| parse_err(c + 1, format!("invalid token character {ch:?}")))?;
            if tok.is_instruction() != (c % 2 == 0) {
                return Err(parse_err(c + 1, "instruction/data alternation broken".into()));
            }
            tokens.push(tok);
        }
        if tokens.len() < 4 || tokens.len() % 2 != 0 {
            return Err(parse_err(
                tokens.len() + 1,
                format!("sequence length {} is not even and >= 4", tokens.len()),
            ));
        }
        if tokens[0] != Token::Write {
            return Err(parse_err(1, "first instruction must be 'w'".into()));
        }
        if tokens[tokens.len() - 2] != Token::Read {
            return Err(parse_err(tokens.len() - 1, "last instruction must be 'r'".into()));
        }
        let s = FflString::new(tokens).map_err(|e| parse_err(1, e.to_string()))?;
        if mode == LoadMode::Strict {
            if let ReadValidity::Violation { position } = s.validate_reads() {
                return Err(DatasetError::ReadViolation {
                    line: line_no,
                    position,
                });
            }
        }
        sequences.push(s);
    }
    Ok(sequences)
}

/// Loads a corpus file and its `.meta` sidecar if one exists.
pub fn load_corpus(path: &Path, mode: LoadMode) -> Result<Corpus, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if !text.is_ascii() {
        return Err(DatasetError::Parse {
            line: text[..text.find(|c: char| !c.is_ascii()).unwrap_or(0)]
                .matches('\n')
                .count()
                + 1,
            column: 1,
            message: "non-ASCII content".into(),
        });
    }
    let sequences = parse_corpus(&text, mode)?;
    let meta = meta_path(path);
    let provenance = if meta.exists() {
        let mtext = fs::read_to_string(&meta).map_err(io_err(&meta))?;
        Some(DatasetSpec::from_meta(&mtext)?)
    } else {
        None
    };
    Ok(Corpus {
        sequences,
        provenance,
    })
}

/// Number of `i` instructions strictly between the read at 0-indexed
/// `read_pos` and the closest earlier `w` or `r` instruction.
pub fn dependency_length(tokens: &[Token], read_pos: usize) -> usize {
    tokens[..read_pos]
        .iter()
        .step_by(2)
        .rev()
        .take_while(|t| **t == Token::Ignore)
        .count()
}

/// Dependency lengths of every read, in position order.
pub fn read_dependency_lengths(tokens: &[Token]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut run = 0;
    for (i, t) in tokens.iter().enumerate().step_by(2) {
        match t {
            Token::Ignore => run += 1,
            Token::Read => {
                out.push((i, run));
                run = 0;
            }
            _ => run = 0,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sequences: usize,
    pub n_read_instructions: usize,
    pub reads_per_sequence: Vec<usize>,
    /// Read counts keyed by dependency length.
    pub dependency_histogram: BTreeMap<usize, u64>,
}

impl CorpusStats {
    pub fn mean_reads(&self) -> f64 {
        if self.n_sequences == 0 {
            0.0
        } else {
            self.n_read_instructions as f64 / self.n_sequences as f64
        }
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut reads_per_sequence = Vec::with_capacity(corpus.len());
    let mut dependency_histogram = BTreeMap::new();
    for s in &corpus.sequences {
        let deps = read_dependency_lengths(s.tokens());
        reads_per_sequence.push(deps.len());
        for (_, d) in deps {
            *dependency_histogram.entry(d).or_insert(0) += 1;
        }
    }
    CorpusStats {
        n_sequences: corpus.len(),
        n_read_instructions: reads_per_sequence.iter().sum(),
        reads_per_sequence,
        dependency_histogram,
    }
}

/// The three held-out evaluation distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardSet {
    /// `FFL(0.8)`, 1000 sequences.
    InDistribution,
    /// `FFL(0.98)`, 100000 sequences.
    Sparse,
    /// `FFL(0.1)`, 3000 sequences.
    Dense,
}

impl StandardSet {
    pub const ALL: [StandardSet; 3] = [Self::InDistribution, Self::Sparse, Self::Dense];

    pub fn p_ignore(self) -> f64 {
        match self {
            Self::InDistribution => 0.8,
            Self::Sparse => 0.98,
            Self::Dense => 0.1,
        }
    }

    pub fn default_count(self) -> usize {
        match self {
            Self::InDistribution => 1_000,
            Self::Sparse => 100_000,
            Self::Dense => 3_000,
        }
    }

    /// Fixed master seed, shared by every training run.
    pub fn seed(self) -> u64 {
        match self {
            Self::InDistribution => 0x7e57_0001,
            Self::Sparse => 0x7e57_0002,
            Self::Dense => 0x7e57_0003,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::InDistribution => "in_distribution",
            Self::Sparse => "sparse",
            Self::Dense => "dense",
        }
    }

    pub fn spec(self, length: usize, count: usize, vocab: u8) -> DatasetSpec {
        let params = FflParams::ffl_with_length(self.p_ignore(), length).with_vocab(vocab);
        DatasetSpec::single(params, count, self.seed(), self.name())
    }

    pub fn corpus(self, length: usize, count: usize, vocab: u8) -> Corpus {
        generate_corpus(&self.spec(length, count, vocab)).expect("standard specs are valid")
    }
}
