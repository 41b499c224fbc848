//! Training loops with online sampling, evaluation cadence, sharpening
//! schedules and logging.
//!
//! # `TrainLog` CSV
//!
//! One header line, then one row per evaluation:
//!
//! ```text
//! step,train_loss,sharpen_loss,lr,in_dist_error,sparse_error,dense_error,best_in_dist,best_sparse,best_dense,norm:<param>,...
//! ```
//!
//! `train_loss` and `sharpen_loss` are means over the steps since the
//! previous row. Floats are printed in their shortest round-trip form.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Component, DatasetSpec, StandardSet};
use crate::evaluation::{glitch_rate, EvalError, EvalMode};
use crate::ffl::{FflParams, FflString, Token};
use crate::models::{sharpening_term, weight_frobenius_norms, ModelConfig, ModelError, SequenceModel};
use crate::rng::{self, Pcg32};
use crate::tensor::{AdamW, AdamWConfig, Graph, LrSchedule, Real, SharpenKind, Tensor, TensorError};

const ONLINE_TAG: u64 = 0x6f6e_6c69_6e65;
const EPOCH_TAG: u64 = 0x6570_6f63_68;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Divergence { step: u64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Positions whose next-token prediction is trained: after each `r` in clean
/// mode, every position but the last in generative mode.
pub fn loss_mask(tokens: &[Token], mode: EvalMode) -> Vec<bool> {
    let n = tokens.len();
    match mode {
        EvalMode::Clean => tokens.iter().enumerate().map(|(i, t)| *t == Token::Read && i + 1 < n).collect(),
        EvalMode::Generative => (0..n).map(|i| i + 1 < n).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Constant,
    LinearRamp,
}

/// Sharpening coefficient over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpenSchedule {
    pub shape: ScheduleShape,
    pub start: u64,
    pub lambda: f64,
}

impl SharpenSchedule {
    pub fn constant(lambda: f64) -> Self {
        Self {
            shape: ScheduleShape::Constant,
            start: 0,
            lambda,
        }
    }

    /// Zero before `start`; afterwards `lambda`, or for the ramp
    /// `lambda (step - start) / (total - start)`.
    pub fn coefficient(&self, step: u64, total: u64) -> f64 {
        if step < self.start {
            return 0.0;
        }
        match self.shape {
            ScheduleShape::Constant => self.lambda,
            ScheduleShape::LinearRamp => {
                if total <= self.start {
                    self.lambda
                } else {
                    self.lambda * (step - self.start) as f64 / (total - self.start) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpenConfig {
    pub kind: SharpenKind,
    pub schedule: SharpenSchedule,
}

/// Where training sequences come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Fresh samples every step from a mixture of FFL distributions.
    Online(Vec<Component>),
    /// A fixed corpus revisited in epochs, reshuffled each epoch.
    Corpus(Vec<FflString>),
}

impl DataSource {
    pub fn ffl(params: FflParams) -> Self {
        Self::Online(vec![Component { weight: 1.0, params }])
    }

    pub fn uniform_mixture(params: &[FflParams]) -> Self {
        let w = 1.0 / params.len() as f64;
        Self::Online(params.iter().map(|&p| Component { weight: w, params: p }).collect())
    }

    pub fn length(&self) -> Option<usize> {
        match self {
            Self::Online(c) => c.first().map(|c| c.params.length),
            Self::Corpus(s) => s.first().map(FflString::len),
        }
    }
}

/// Held-out sets scored during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps (and after the last step); 0 disables.
    pub every: u64,
    /// Sequence length of the evaluation sets (0 means the training length).
    pub length: usize,
    pub in_dist_count: usize,
    /// First 1% of the 100000-sequence sparse set.
    pub sparse_count: usize,
    /// First 1% of the 3000-sequence dense set.
    pub dense_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 100,
            length: 0,
            in_dist_count: 1000,
            sparse_count: 1000,
            dense_count: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub mode: EvalMode,
    pub data: DataSource,
    pub data_seed: u64,
    pub model_seed: u64,
    pub optimizer: AdamWConfig,
    pub warmup: u64,
    pub sharpen: Option<SharpenConfig>,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 16,
            mode: EvalMode::Clean,
            data: DataSource::ffl(FflParams::ffl(0.8)),
            data_seed: 0,
            model_seed: 0,
            optimizer: AdamWConfig::default(),
            warmup: 50,
            sharpen: None,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.steps > 0 && self.steps <= self.warmup {
            return bad("steps must exceed warmup");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if let Some(s) = &self.sharpen {
            if !(s.schedule.lambda >= 0.0) || !s.schedule.lambda.is_finite() {
                return bad("sharpening coefficient must be non-negative");
            }
        }
        match &self.data {
            DataSource::Online(components) => {
                let spec = DatasetSpec {
                    components: components.clone(),
                    count: 0,
                    master_seed: 0,
                    split: "train".into(),
                };
                spec.validate().map_err(|e| TrainError::Config(e.to_string()))?;
            }
            DataSource::Corpus(seqs) => {
                let Some(first) = seqs.first() else {
                    return bad("training corpus is empty");
                };
                if seqs.iter().any(|s| s.len() != first.len()) {
                    return bad("training corpus sequences must share one length");
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.optimizer.lr, self.warmup, self.steps)
    }

    pub fn train_length(&self) -> usize {
        self.data.length().unwrap_or(0)
    }
}

/// Seed of slot `b` in the batch of (1-based) `step`: the online stream
/// samples each training sequence with `ffl::sample(params, seed)`.
pub fn online_seed(data_seed: u64, step: u64, batch_size: usize, b: usize) -> u64 {
    rng::derive_seed(rng::mix64(data_seed ^ ONLINE_TAG), (step - 1) * batch_size as u64 + b as u64)
}

/// Parameters are initialized from this stream of `model_seed`...
pub fn init_seed(model_seed: u64) -> u64 {
    rng::derive_seed(model_seed, 0)
}

/// ...and dropout masks from this one.
pub fn dropout_seed(model_seed: u64) -> u64 {
    rng::derive_seed(model_seed, 1)
}

pub fn init_model<F: Real>(config: ModelConfig, model_seed: u64) -> Result<SequenceModel<F>, ModelError> {
    SequenceModel::init(config, init_seed(model_seed))
}

struct Batcher<'a> {
    cfg: &'a TrainConfig,
    spec: Option<DatasetSpec>,
    order: Vec<usize>,
    epoch: Option<u64>,
}

impl<'a> Batcher<'a> {
    fn new(cfg: &'a TrainConfig) -> Self {
        let spec = match &cfg.data {
            DataSource::Online(components) => Some(DatasetSpec {
                components: components.clone(),
                count: 0,
                master_seed: rng::mix64(cfg.data_seed ^ ONLINE_TAG),
                split: "train".into(),
            }),
            DataSource::Corpus(_) => None,
        };
        Self {
            cfg,
            spec,
            order: Vec::new(),
            epoch: None,
        }
    }

    fn sequence(&mut self, step: u64, b: usize) -> FflString {
        let flat = (step - 1) * self.cfg.batch_size as u64 + b as u64;
        match (&self.cfg.data, &self.spec) {
            (DataSource::Online(_), Some(spec)) => spec.sample_index(flat),
            (DataSource::Corpus(seqs), _) => {
                let n = seqs.len() as u64;
                let epoch = flat / n;
                if self.epoch != Some(epoch) {
                    self.order = (0..seqs.len()).collect();
                    let mut r = rng::pcg(rng::derive_seed(rng::mix64(self.cfg.data_seed ^ EPOCH_TAG), epoch));
                    for i in (1..self.order.len()).rev() {
                        let j = rng::below(&mut r, (i + 1) as u32) as usize;
                        self.order.swap(i, j);
                    }
                    self.epoch = Some(epoch);
                }
                seqs[self.order[(flat % n) as usize]].clone()
            }
            _ => unreachable!("online source always has a spec"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub train_loss: f64,
    pub sharpen_loss: f64,
    pub lr: f64,
    pub in_dist_error: f64,
    pub sparse_error: f64,
    pub dense_error: f64,
    pub best_in_dist: f64,
    pub best_sparse: f64,
    pub best_dense: f64,
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub param_names: Vec<String>,
    pub records: Vec<LogRecord>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn header(&self) -> String {
        let mut h = String::from(
            "step,train_loss,sharpen_loss,lr,in_dist_error,sparse_error,dense_error,best_in_dist,best_sparse,best_dense",
        );
        for n in &self.param_names {
            h.push_str(",norm:");
            h.push_str(n);
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.train_loss,
                r.sharpen_loss,
                r.lr,
                r.in_dist_error,
                r.sparse_error,
                r.dense_error,
                r.best_in_dist,
                r.best_sparse,
                r.best_dense
            );
            for v in &r.norms {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// The three evaluation subsets used on the training cadence.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub in_dist: Vec<FflString>,
    pub sparse: Vec<FflString>,
    pub dense: Vec<FflString>,
}

impl EvalSets {
    pub fn standard(cfg: &EvalConfig, length: usize, vocab: u8) -> Self {
        let take = |set: StandardSet, n: usize| set.corpus(length, n, vocab).sequences;
        Self {
            in_dist: take(StandardSet::InDistribution, cfg.in_dist_count),
            sparse: take(StandardSet::Sparse, cfg.sparse_count),
            dense: take(StandardSet::Dense, cfg.dense_count),
        }
    }
}

fn error_or_nan<F: Real>(m: &SequenceModel<F>, set: &[FflString], mode: EvalMode) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(glitch_rate(m, set, mode)?.error_rate)
}

fn best(prev: Option<&LogRecord>, pick: impl Fn(&LogRecord) -> f64, now: f64) -> f64 {
    match prev.map(pick) {
        Some(b) if !(now < b) && !b.is_nan() => b,
        _ => now,
    }
}

/// Trains `model` in place according to `cfg` and returns the log.
pub fn train<F: Real>(model: &mut SequenceModel<F>, cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    // norm columns follow the name-sorted order of `weight_frobenius_norms`
    let mut log = TrainLog {
        param_names: weight_frobenius_norms(&model.params).into_keys().collect(),
        records: Vec::new(),
        checkpoint: None,
    };
    if cfg.steps == 0 {
        return Ok(log);
    }
    let vocab = match &cfg.data {
        DataSource::Online(c) => c.iter().map(|c| c.params.vocab).max().unwrap_or(2),
        DataSource::Corpus(s) => s.iter().filter_map(FflString::max_data_symbol).max().map_or(2, |m| (m + 1).max(2)),
    };
    if crate::ffl::vocab_size(vocab) > model.config.vocab() {
        return Err(TrainError::Config(format!(
            "data vocabulary {} exceeds model vocabulary {}",
            crate::ffl::vocab_size(vocab),
            model.config.vocab()
        )));
    }
    let eval_len = if cfg.eval.length == 0 { cfg.train_length() } else { cfg.eval.length };
    let sets = (cfg.eval.every > 0).then(|| EvalSets::standard(&cfg.eval, eval_len, vocab));
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.optimizer, &model.params.tensors);
    let mut dropout_rng: Pcg32 = rng::pcg(dropout_seed(cfg.model_seed));
    let mut batcher = Batcher::new(cfg);
    let (mut loss_acc, mut sharp_acc, mut acc_n) = (0.0, 0.0, 0u64);

    for step in 1..=cfg.steps {
        let seqs: Vec<FflString> = (0..cfg.batch_size).map(|b| batcher.sequence(step, b)).collect();
        let idx: Vec<Vec<usize>> = seqs.iter().map(FflString::indices).collect();
        let mut mask = Vec::new();
        let mut targets = Vec::new();
        for s in &seqs {
            let toks = s.tokens();
            mask.extend(loss_mask(toks, cfg.mode));
            targets.extend((0..toks.len()).map(|i| toks.get(i + 1).map_or(0, |t| t.index())));
        }

        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let out = model.forward(&mut g, &vars, &idx, true, &mut dropout_rng)?;
        let task = g.cross_entropy_masked(out.logits, &targets, &mask)?;
        let mut loss = task;
        let mut sharp_value = 0.0;
        if let Some(sc) = &cfg.sharpen {
            let coef = sc.schedule.coefficient(step, cfg.steps);
            if let Some(s) = sharpening_term(&mut g, &out, sc.kind)? {
                sharp_value = g.value(s).item().f64();
                if coef > 0.0 {
                    let scaled = g.scale(s, coef);
                    loss = g.add(loss, scaled)?;
                }
            }
        }
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(TrainError::Divergence { step, loss: lv });
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor<F>> = vars
            .iter()
            .zip(&model.params.tensors)
            .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
            .collect();
        let lr = schedule.rate(step);
        opt.step(&mut model.params.tensors, &grads, lr)?;
        loss_acc += g.value(task).item().f64();
        sharp_acc += sharp_value;
        acc_n += 1;

        let due = cfg.eval.every > 0 && (step % cfg.eval.every == 0 || step == cfg.steps);
        if let (true, Some(sets)) = (due, &sets) {
            let in_dist = error_or_nan(model, &sets.in_dist, cfg.mode)?;
            let sparse = error_or_nan(model, &sets.sparse, cfg.mode)?;
            let dense = error_or_nan(model, &sets.dense, cfg.mode)?;
            let prev = log.records.last();
            let record = LogRecord {
                step,
                train_loss: loss_acc / acc_n as f64,
                sharpen_loss: sharp_acc / acc_n as f64,
                lr,
                in_dist_error: in_dist,
                sparse_error: sparse,
                dense_error: dense,
                best_in_dist: best(prev, |r| r.best_in_dist, in_dist),
                best_sparse: best(prev, |r| r.best_sparse, sparse),
                best_dense: best(prev, |r| r.best_dense, dense),
                norms: weight_frobenius_norms(&model.params)
                    .into_values()
                    .collect(),
            };
            log.records.push(record);
            loss_acc = 0.0;
            sharp_acc = 0.0;
            acc_n = 0;
        }
    }
    Ok(log)
}

/// How replicate `i` derives its seeds from the template's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Data and model seeds both offset by `i`.
    Both,
    /// Only the data seed varies.
    DataOnly,
    /// Only the model seed varies.
    ModelOnly,
}

impl SeedPolicy {
    pub fn seeds(self, data_seed: u64, model_seed: u64, i: u64) -> (u64, u64) {
        match self {
            Self::Both => (data_seed + i, model_seed + i),
            Self::DataOnly => (data_seed + i, model_seed),
            Self::ModelOnly => (data_seed, model_seed + i),
        }
    }
}

pub type RunResult<F> = Result<(SequenceModel<F>, TrainLog), TrainError>;

/// Independent runs on a pool of `workers` threads, returned in replicate
/// order. A failing run does not affect its siblings.
pub fn run_replicates<F: Real>(
    model: &ModelConfig,
    template: &TrainConfig,
    n: usize,
    policy: SeedPolicy,
    workers: usize,
) -> Result<Vec<RunResult<F>>, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("need at least one replicate".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok(pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let (ds, ms) = policy.seeds(template.data_seed, template.model_seed, i as u64);
                let cfg = TrainConfig {
                    data_seed: ds,
                    model_seed: ms,
                    ..template.clone()
                };
                let mut m = init_model::<F>(model.clone(), ms)?;
                let log = train(&mut m, &cfg)?;
                Ok((m, log))
            })
            .collect()
    }))
}
