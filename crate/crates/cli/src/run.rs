//! `train` and `sweep`.
//!
//! A run directory holds `config.toml` (the resolved configuration, seeds
//! included), `train_log.csv`, `model.ckpt` and `final_eval.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use ffb_core::dataset::StandardSet;
use ffb_core::evaluation::{glitch_rate, mean_attention_entropy, EvalMode};
use ffb_core::models::{ModelConfig, SequenceModel};
use ffb_core::training::{init_model, run_replicates, train, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::{self, FinalEvalSection, ResolvedRun, RunConfigFile};
use crate::{io_error, to_json, write_file, CliError, RunFlags};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const FINAL_EVAL_FILE: &str = "final_eval.json";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Replicates per grid point (config key `sweep.replicates`).
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Concurrent runs (config key `sweep.workers`).
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Scores of one held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub count: usize,
    pub length: usize,
    pub n_read_predictions: u64,
    pub n_errors: u64,
    pub error_rate: f64,
    pub dependency_histogram: BTreeMap<usize, u64>,
}

/// Contents of `final_eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub sets: BTreeMap<String, SetSummary>,
    /// Mean causal row entropy of attention on the in-distribution set.
    pub attention_entropy: Option<f64>,
}

impl FinalEval {
    pub fn rate(&self, set: &str) -> Option<f64> {
        self.sets.get(set).map(|s| s.error_rate)
    }
}

pub fn final_eval(
    model: &SequenceModel<f32>,
    fe: &FinalEvalSection,
    train_len: usize,
    vocab: u8,
    mode: EvalMode,
) -> Result<FinalEval, CliError> {
    let length = if fe.length == 0 { train_len } else { fe.length };
    let mut sets = BTreeMap::new();
    let mut entropy = None;
    for (set, count) in [
        (StandardSet::InDistribution, fe.in_dist_count),
        (StandardSet::Sparse, fe.sparse_count),
        (StandardSet::Dense, fe.dense_count),
    ] {
        if count == 0 {
            continue;
        }
        let corpus = set.corpus(length, count, vocab).sequences;
        let r = glitch_rate(model, &corpus, mode).map_err(|e| CliError::Usage(e.to_string()))?;
        if set == StandardSet::InDistribution && matches!(model.config, ModelConfig::Transformer(_)) {
            entropy = Some(mean_attention_entropy(model, &corpus).map_err(|e| CliError::Usage(e.to_string()))?);
        }
        sets.insert(
            set.name().to_string(),
            SetSummary {
                count,
                length,
                n_read_predictions: r.n_read_predictions,
                n_errors: r.n_errors,
                error_rate: r.error_rate,
                dependency_histogram: r.dependency_histogram,
            },
        );
    }
    Ok(FinalEval {
        sets,
        attention_entropy: entropy,
    })
}

fn data_vocab(cfg: &RunConfigFile) -> u8 {
    cfg.data.vocab
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(
    dir: &Path,
    frozen: &RunConfigFile,
    model: &SequenceModel<f32>,
    log: &mut TrainLog,
    resolved: &ResolvedRun,
) -> Result<FinalEval, CliError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let text = toml::to_string(frozen).map_err(|e| CliError::Usage(format!("config serialization: {e}")))?;
    write_file(&dir.join(CONFIG_FILE), text)?;
    let ck = dir.join(CHECKPOINT_FILE);
    let f = std::fs::File::create(&ck).map_err(io_error(&ck))?;
    model
        .write_checkpoint(std::io::BufWriter::new(f))
        .map_err(|e| CliError::Io(format!("{}: {e}", ck.display())))?;
    log.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_file(&dir.join(LOG_FILE), log.to_csv())?;
    let fe = if resolved.final_eval.enabled {
        final_eval(
            model,
            &resolved.final_eval,
            resolved.train.train_length(),
            data_vocab(frozen),
            resolved.train.mode,
        )?
    } else {
        FinalEval {
            sets: BTreeMap::new(),
            attention_entropy: None,
        }
    };
    write_file(&dir.join(FINAL_EVAL_FILE), to_json(&fe))?;
    Ok(fe)
}

/// The resolved config with seeds and model filled in.
fn freeze(cfg: &RunConfigFile, train: &TrainConfig, model: &ModelConfig) -> RunConfigFile {
    let mut f = cfg.clone();
    f.train.data_seed = Some(train.data_seed);
    f.train.model_seed = Some(train.model_seed);
    f.model = Some(model.clone());
    f.sweep = Default::default();
    f
}

fn train_error(e: ffb_core::training::TrainError) -> CliError {
    match e {
        ffb_core::training::TrainError::Divergence { .. } => CliError::Check(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let tree = a.run.config_tree()?;
    let cfg = RunConfigFile::from_value(tree)?;
    let resolved = cfg.resolve(a.run.seeds())?;
    let dir = resolved.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    let mut model = init_model::<f32>(resolved.model.clone(), resolved.train.model_seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut log = train(&mut model, &resolved.train).map_err(train_error)?;
    let frozen = freeze(&cfg, &resolved.train, &resolved.model);
    let fe = write_run(&dir, &frozen, &model, &mut log, &resolved)?;
    outln!("trained {} steps into {}", resolved.train.steps, dir.display());
    for (name, s) in &fe.sets {
        outln!("{name}: {} errors / {} reads (rate {})", s.n_errors, s.n_read_predictions, s.error_rate);
    }
    Ok(())
}

/// Cartesian product of the grid in key order; each point lists its settings.
pub fn expand_grid(grid: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
    let mut points = vec![Vec::new()];
    for (k, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut q = p.clone();
                q.push((k.clone(), v.clone()));
                next.push(q);
            }
        }
        points = next;
    }
    points
}

fn describe(point: &[(String, toml::Value)]) -> String {
    point
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut tree = a.run.config_tree()?;
    if let Some(r) = a.replicates {
        config::set_path(&mut tree, "sweep.replicates", toml::Value::Integer(r as i64))?;
    }
    if let Some(w) = a.workers {
        config::set_path(&mut tree, "sweep.workers", toml::Value::Integer(w as i64))?;
    }
    let base = RunConfigFile::from_value(tree.clone())?;
    let sweep = base.sweep.clone();
    if sweep.replicates == 0 {
        return Err(CliError::Usage("sweep.replicates must be at least 1".into()));
    }
    let out = base.out_dir.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    std::fs::create_dir_all(&out).map_err(io_error(&out))?;

    let mut index = String::from(
        "run_dir,point,replicate,data_seed,model_seed,status,in_dist_error,sparse_error,dense_error,message\n",
    );
    let mut failures = 0usize;
    for (pi, point) in expand_grid(&sweep.grid).into_iter().enumerate() {
        let desc = describe(&point);
        let mut t = tree.clone();
        let prepared = point
            .iter()
            .try_for_each(|(k, v)| config::set_path(&mut t, k, v.clone()))
            .and_then(|_| RunConfigFile::from_value(t))
            .and_then(|cfg| cfg.resolve(a.run.seeds()).map(|r| (cfg, r)));
        let (cfg, resolved) = match prepared {
            Ok(x) => x,
            Err(e) => {
                failures += sweep.replicates;
                for r in 0..sweep.replicates {
                    let _ = writeln!(
                        index,
                        "{},{},{r},,,config_error,,,,{}",
                        csv_field(&format!("point{pi:03}/rep{r:02}")),
                        csv_field(&desc),
                        csv_field(&e.to_string())
                    );
                }
                continue;
            }
        };
        let results = run_replicates::<f32>(
            &resolved.model,
            &resolved.train,
            sweep.replicates,
            sweep.seed_policy,
            sweep.workers,
        )
        .map_err(train_error)?;
        for (r, result) in results.into_iter().enumerate() {
            let rel = format!("point{pi:03}/rep{r:02}");
            let (ds, ms) = sweep
                .seed_policy
                .seeds(resolved.train.data_seed, resolved.train.model_seed, r as u64);
            let outcome = result.map_err(train_error).and_then(|(model, mut log)| {
                let train_cfg = TrainConfig {
                    data_seed: ds,
                    model_seed: ms,
                    ..resolved.train.clone()
                };
                let frozen = freeze(&cfg, &train_cfg, &resolved.model);
                write_run(&out.join(&rel), &frozen, &model, &mut log, &resolved)
            });
            match outcome {
                Ok(fe) => {
                    let f = |s: &str| fe.rate(s).map_or(String::new(), |v| v.to_string());
                    let _ = writeln!(
                        index,
                        "{rel},{},{r},{ds},{ms},ok,{},{},{},",
                        csv_field(&desc),
                        f("in_distribution"),
                        f("sparse"),
                        f("dense")
                    );
                }
                Err(e) => {
                    failures += 1;
                    let _ = writeln!(
                        index,
                        "{rel},{},{r},{ds},{ms},failed,,,,{}",
                        csv_field(&desc),
                        csv_field(&e.to_string())
                    );
                }
            }
        }
    }
    write_file(&out.join(INDEX_FILE), &index)?;
    outln!("sweep index written to {}", out.join(INDEX_FILE).display());
    if failures > 0 {
        return Err(CliError::Check(format!("{failures} run(s) failed; see {INDEX_FILE}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion_is_cartesian() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![toml::Value::Integer(1), toml::Value::Integer(2)]);
        g.insert("b".to_string(), vec![toml::Value::Float(0.5), toml::Value::Float(1.5), toml::Value::Float(2.5)]);
        let pts = expand_grid(&g);
        assert_eq!(pts.len(), 6);
        assert_eq!(describe(&pts[0]), "a=1;b=0.5");
        assert_eq!(describe(&pts[5]), "a=2;b=2.5");
        assert_eq!(expand_grid(&BTreeMap::new()).len(), 1);
    }
}
