use std::path::PathBuf;

use clap::Args;
use ffb_core::dataset::{generate_corpus, save_corpus, DatasetSpec, StandardSet};

use crate::config::{RunConfigFile, SeedFlags};
use crate::{dataset_err, io_error, CliError};

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// TOML config; only `seed` and the `[data]` section are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ignore probability.
    #[arg(long)]
    pub p_i: Option<f64>,
    /// Comma-separated ignore probabilities of a uniform mixture.
    #[arg(long, value_delimiter = ',')]
    pub mixture: Option<Vec<f64>>,
    /// One of the fixed evaluation sets: in_distribution | sparse | dense.
    #[arg(long, conflicts_with_all = ["p_i", "mixture", "seed"])]
    pub standard: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Sequence length.
    #[arg(long = "T")]
    pub length: Option<usize>,
    #[arg(long)]
    pub vocab: Option<u8>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value = "corpus.txt")]
    pub out: PathBuf,
}

pub fn parse_standard(name: &str) -> Result<StandardSet, CliError> {
    match name {
        "in_distribution" | "in-distribution" | "in_dist" => Ok(StandardSet::InDistribution),
        "sparse" => Ok(StandardSet::Sparse),
        "dense" => Ok(StandardSet::Dense),
        _ => Err(CliError::Usage(format!("unknown standard set {name:?}"))),
    }
}

pub fn gen_spec(a: &GenArgs) -> Result<DatasetSpec, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfigFile::parse(&std::fs::read_to_string(p).map_err(io_error(p))?)?,
        None => RunConfigFile::default(),
    };
    if let Some(t) = a.length {
        cfg.data.length = t;
    }
    if let Some(v) = a.vocab {
        cfg.data.vocab = v;
    }
    if let Some(name) = &a.standard {
        let set = parse_standard(name)?;
        return Ok(set.spec(cfg.data.length, a.count, cfg.data.vocab));
    }
    if a.p_i.is_some() || a.mixture.is_some() {
        cfg.data.p_i = a.p_i;
        cfg.data.mixture = a.mixture.clone();
    }
    let (seed, _) = cfg.resolve_seeds(SeedFlags {
        seed: a.seed,
        ..Default::default()
    })?;
    let spec = DatasetSpec::uniform_mixture(&cfg.data.components()?, a.count, seed, &a.split);
    spec.validate().map_err(dataset_err)?;
    Ok(spec)
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let spec = gen_spec(a)?;
    let corpus = generate_corpus(&spec).map_err(dataset_err)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    save_corpus(&corpus, &a.out).map_err(dataset_err)?;
    outln!("wrote {} sequences to {}", corpus.len(), a.out.display());
    Ok(())
}
