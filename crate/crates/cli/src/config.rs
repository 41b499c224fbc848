//! Run configuration files (TOML).
//!
//! ```toml
//! out_dir = "runs/baseline"
//! seed = 3                      # default for both data and model seeds
//!
//! [data]
//! p_i = 0.8                     # or: mixture = [0.9, 0.98, 0.1]
//! length = 512
//! vocab = 2
//! # corpus = "train.txt"        # multi-epoch training on a fixed corpus
//!
//! [model]
//! kind = "transformer"          # or "lstm"
//! layers = 2
//! d_model = 64
//! heads = 4
//! max_len = 512
//!
//! [train]
//! steps = 10000
//! batch_size = 16
//! mode = "clean"
//! lr = 3e-4
//! warmup = 50
//! # data_seed = 0
//! # model_seed = 0
//!
//! [train.sharpen]
//! kind = "entropy"              # entropy | neg_l2 | neg_linf
//! shape = "constant"            # constant | linear_ramp
//! start = 0
//! lambda = 0.01
//!
//! [train.eval]
//! every = 100
//!
//! [final_eval]
//! sparse_count = 10000
//!
//! [sweep]
//! replicates = 5
//! seed_policy = "both"          # both | data_only | model_only
//! workers = 1
//! [sweep.grid]
//! "train.lr" = [1e-4, 3e-4]
//! ```
//!
//! Unknown keys anywhere are errors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ffb_core::dataset::{load_corpus, LoadMode};
use ffb_core::evaluation::EvalMode;
use ffb_core::ffl::{vocab_size, FflParams};
use ffb_core::models::{ModelConfig, TransformerConfig};
use ffb_core::tensor::{AdamWConfig, SharpenKind};
use ffb_core::training::{
    DataSource, EvalConfig, ScheduleShape, SeedPolicy, SharpenConfig, SharpenSchedule, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable consulted only when neither a flag nor the config
/// sets a seed.
pub const SEED_ENV: &str = "FFB_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub final_eval: FinalEvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub p_i: Option<f64>,
    pub mixture: Option<Vec<f64>>,
    pub length: usize,
    pub vocab: u8,
    pub corpus: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            p_i: None,
            mixture: None,
            length: 512,
            vocab: 2,
            corpus: None,
        }
    }
}

impl DataSection {
    pub fn components(&self) -> Result<Vec<FflParams>, CliError> {
        let list = match (&self.p_i, &self.mixture) {
            (Some(_), Some(_)) => return Err(CliError::Usage("set either data.p_i or data.mixture, not both".into())),
            (Some(p), None) => vec![*p],
            (None, Some(m)) if !m.is_empty() => m.clone(),
            (None, Some(_)) => return Err(CliError::Usage("data.mixture is empty".into())),
            (None, None) => vec![0.8],
        };
        let params: Vec<FflParams> = list
            .iter()
            .map(|&p| FflParams::ffl_with_length(p, self.length).with_vocab(self.vocab))
            .collect();
        for p in &params {
            p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(params)
    }

    pub fn source(&self) -> Result<DataSource, CliError> {
        if let Some(path) = &self.corpus {
            let corpus = load_corpus(path, LoadMode::Strict).map_err(crate::dataset_err)?;
            return Ok(DataSource::Corpus(corpus.sequences));
        }
        Ok(DataSource::Online(
            ffb_core::dataset::DatasetSpec::uniform_mixture(&self.components()?, 0, 0, "train").components,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpenSection {
    pub kind: SharpenKind,
    #[serde(default = "constant_shape")]
    pub shape: ScheduleShape,
    #[serde(default)]
    pub start: u64,
    pub lambda: f64,
}

fn constant_shape() -> ScheduleShape {
    ScheduleShape::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub mode: EvalMode,
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup: u64,
    pub sharpen: Option<SharpenSection>,
    pub eval: EvalConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            mode: t.mode,
            data_seed: None,
            model_seed: None,
            lr: t.optimizer.lr,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            weight_decay: t.optimizer.weight_decay,
            eps: t.optimizer.eps,
            warmup: t.warmup,
            sharpen: None,
            eval: t.eval,
        }
    }
}

/// Evaluation after the last step, on the leading sequences of each standard set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinalEvalSection {
    pub enabled: bool,
    /// 0 means the training length.
    pub length: usize,
    pub in_dist_count: usize,
    pub sparse_count: usize,
    pub dense_count: usize,
}

impl Default for FinalEvalSection {
    fn default() -> Self {
        Self {
            enabled: true,
            length: 0,
            in_dist_count: 1000,
            sparse_count: 10_000,
            dense_count: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub replicates: usize,
    pub seed_policy: SeedPolicy,
    pub workers: usize,
    /// Dotted config key to the list of values it takes.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            replicates: 1,
            seed_policy: SeedPolicy::Both,
            workers: 1,
            grid: BTreeMap::new(),
        }
    }
}

/// Everything needed to launch one training run.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub final_eval: FinalEvalSection,
    pub out_dir: Option<PathBuf>,
}

/// Seeds given on the command line; they win over the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeedFlags {
    pub seed: Option<u64>,
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn from_value(v: toml::Value) -> Result<Self, CliError> {
        v.try_into().map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Flag seeds, then config seeds, then the environment default, then 0.
    pub fn resolve_seeds(&self, flags: SeedFlags) -> Result<(u64, u64), CliError> {
        let env = env_seed()?;
        let pick = |specific_flag: Option<u64>, specific_cfg: Option<u64>| {
            specific_flag
                .or(flags.seed)
                .or(specific_cfg)
                .or(self.seed)
                .or(env)
                .unwrap_or(0)
        };
        Ok((
            pick(flags.data_seed, self.train.data_seed),
            pick(flags.model_seed, self.train.model_seed),
        ))
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| {
            ModelConfig::Transformer(TransformerConfig {
                max_len: self.data.length,
                vocab: vocab_size(self.data.vocab),
                ..TransformerConfig::default()
            })
        })
    }

    pub fn resolve(&self, seeds: SeedFlags) -> Result<ResolvedRun, CliError> {
        let (data_seed, model_seed) = self.resolve_seeds(seeds)?;
        let t = &self.train;
        let sharpen = t.sharpen.as_ref().map(|s| SharpenConfig {
            kind: s.kind,
            schedule: SharpenSchedule {
                shape: s.shape,
                start: s.start,
                lambda: s.lambda,
            },
        });
        let train = TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            mode: t.mode,
            data: self.data.source()?,
            data_seed,
            model_seed,
            optimizer: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                weight_decay: t.weight_decay,
                eps: t.eps,
            },
            warmup: t.warmup,
            sharpen,
            eval: t.eval.clone(),
        };
        train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let model = self.model_config();
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(ResolvedRun {
            model,
            train,
            final_eval: self.final_eval.clone(),
            out_dir: self.out_dir.clone(),
        })
    }
}

/// Sets `dotted.key = value` inside a TOML table, creating tables on the way.
pub fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad config key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{key}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| CliError::Usage(format!("{key}: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
pub fn parse_value(text: &str) -> toml::Value {
    let doc = format!("v = {text}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.into())),
        Err(_) => toml::Value::String(text.into()),
    }
}

pub fn parse_assignment(s: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}
