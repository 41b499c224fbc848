//! Trainable sequence models, the hand-built two-layer construction, and
//! attention sharpening terms.

mod lstm;
pub mod prop1;
mod transformer;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lstm::LstmConfig;
pub use transformer::{Activation, PosEncoding, TransformerConfig};

use crate::rng::{self, Pcg32};
use crate::tensor::{self, Checkpoint, Graph, Real, SharpenKind, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds the model maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("token index {token} outside vocabulary of size {vocab}")]
    Vocab { token: usize, vocab: usize },
    #[error("batch sequences must share one length")]
    Ragged,
    #[error("empty batch or sequence")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Records every tensor as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// `‖W‖_F` per named parameter.
pub fn weight_frobenius_norms<F: Real>(params: &ParamSet<F>) -> BTreeMap<String, f64> {
    params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.frobenius_norm()))
        .collect()
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut Pcg32) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Pcg32) -> Tensor<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Lstm(LstmConfig),
}

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        match self {
            Self::Transformer(c) => c.vocab,
            Self::Lstm(c) => c.vocab,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::Transformer(c) => c.validate(),
            Self::Lstm(c) => c.validate(),
        }
    }

    /// Longest input the model accepts, if bounded.
    pub fn max_len(&self) -> Option<usize> {
        match self {
            Self::Transformer(c) => Some(c.max_len),
            Self::Lstm(_) => None,
        }
    }
}

/// Handle to one attention probability matrix on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnHandle {
    pub layer: usize,
    pub head: usize,
    pub batch: usize,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch * T, vocab]`, batch-major.
    pub logits: Var,
    pub seq_len: usize,
    pub attention: Vec<AttnHandle>,
}

/// Attention weights of one sequence: `layers[l][h]` is a `T x T` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor<f64>>>,
}

impl AttentionRecord {
    pub fn from_graph<F: Real>(g: &Graph<F>, out: &ForwardOutput, batch: usize) -> Self {
        let n_layers = out.attention.iter().map(|a| a.layer + 1).max().unwrap_or(0);
        let mut layers: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); n_layers];
        for a in out.attention.iter().filter(|a| a.batch == batch) {
            let t = g.value(a.probs).cast();
            let heads = &mut layers[a.layer];
            debug_assert_eq!(heads.len(), a.head);
            heads.push(t);
        }
        Self { layers }
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, Tensor::rows)
    }

    pub fn heads(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.layers.iter().flatten()
    }
}

/// Mean row sharpness over all layers, heads and rows with at least two
/// causal entries. Returns 0 when no row qualifies.
pub fn sharpening_loss(record: &AttentionRecord, kind: SharpenKind) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in record.heads() {
        for i in 0..a.rows() {
            let s = (i + 1).min(a.cols());
            if s < 2 {
                continue;
            }
            total += kind.row_value(&a.row(i)[..s]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Differentiable counterpart of [`sharpening_loss`] over every recorded head.
pub fn sharpening_term<F: Real>(
    g: &mut Graph<F>,
    out: &ForwardOutput,
    kind: SharpenKind,
) -> Result<Option<Var>, ModelError> {
    let mut parts = Vec::new();
    let mut count = 0;
    for a in &out.attention {
        let (v, n) = g.sharpness(a.probs, kind, true);
        parts.push(v);
        count += n;
    }
    if count == 0 {
        return Ok(None);
    }
    let all = g.concat_rows(&parts)?;
    let s = g.sum(all);
    Ok(Some(g.scale(s, 1.0 / count as f64)))
}

/// A trainable model: configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Real> SequenceModel<F> {
    /// Fresh parameters drawn from the stream for `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::pcg(seed);
        let params = match &config {
            ModelConfig::Transformer(c) => transformer::init(c, &mut rng),
            ModelConfig::Lstm(c) => lstm::init(c, &mut rng),
        };
        Ok(Self {
            config,
            params: params.cast(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_batch(&self, batch: &[Vec<usize>]) -> Result<usize, ModelError> {
        let len = batch.first().ok_or(ModelError::Empty)?.len();
        if len == 0 {
            return Err(ModelError::Empty);
        }
        if batch.iter().any(|s| s.len() != len) {
            return Err(ModelError::Ragged);
        }
        if let Some(max) = self.config.max_len() {
            if len > max {
                return Err(ModelError::TooLong { len, max });
            }
        }
        let vocab = self.config.vocab();
        if let Some(&token) = batch.iter().flatten().find(|&&t| t >= vocab) {
            return Err(ModelError::Vocab { token, vocab });
        }
        Ok(len)
    }

    /// Records the forward pass of `batch` (equal-length index sequences)
    /// using parameter leaves `vars` (from [`ParamSet::bind`]).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        batch: &[Vec<usize>],
        training: bool,
        dropout_rng: &mut Pcg32,
    ) -> Result<ForwardOutput, ModelError> {
        let len = self.check_batch(batch)?;
        match &self.config {
            ModelConfig::Transformer(c) => transformer::forward(c, g, vars, batch, len, training, dropout_rng),
            ModelConfig::Lstm(c) => lstm::forward(c, g, vars, batch, len),
        }
    }

    /// Inference logits `[T, vocab]` for each sequence, plus attention records
    /// (empty for recurrent models).
    pub fn infer(&self, batch: &[Vec<usize>]) -> Result<(Vec<Tensor<F>>, Vec<AttentionRecord>), ModelError> {
        let mut g = Graph::new();
        let vars = self.params.bind_constant(&mut g);
        let mut unused = rng::pcg(0);
        let out = self.forward(&mut g, &vars, batch, false, &mut unused)?;
        let logits = g.value(out.logits);
        let t = out.seq_len;
        let v = logits.cols();
        let per_seq = (0..batch.len())
            .map(|b| Tensor::new(vec![t, v], logits.data()[b * t * v..(b + 1) * t * v].to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let records = if out.attention.is_empty() {
            Vec::new()
        } else {
            (0..batch.len()).map(|b| AttentionRecord::from_graph(&g, &out, b)).collect()
        };
        Ok((per_seq, records))
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let metadata = serde_json::to_string(&self.config).map_err(|e| ModelError::Config(e.to_string()))?;
        let ck = Checkpoint {
            metadata,
            tensors: self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect(),
        };
        Ok(tensor::write_checkpoint(w, &ck)?)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self, ModelError> {
        let ck: Checkpoint<F> = tensor::read_checkpoint(r)?;
        let config: ModelConfig =
            serde_json::from_str(&ck.metadata).map_err(|e| ModelError::Config(e.to_string()))?;
        let expect = Self::init(config.clone(), 0)?;
        let mut params = ParamSet::new();
        for (name, t) in ck.tensors {
            params.push(name, t);
        }
        if params.names != expect.params.names
            || params.tensors.iter().zip(&expect.params.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Config("checkpoint tensors do not match configuration".into()));
        }
        Ok(Self { config, params })
    }
}
