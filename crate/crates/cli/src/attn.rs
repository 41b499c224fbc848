//! `attn-dump`: attention matrices of one input, one CSV per layer and head.
//!
//! Each CSV holds a `T x T` row-major matrix without a header; row `i` is the
//! attention of query position `i` (0-indexed). `manifest.json` lists the
//! files and the positions of write and read instructions.

use std::path::PathBuf;

use clap::Args;
use ffb_core::dataset::{load_corpus, LoadMode};
use ffb_core::ffl::{self, FflString, Token};
use serde::{Deserialize, Serialize};

use crate::eval::load_model;
use crate::{dataset_err, to_json, write_file, CliError};

#[derive(Debug, Clone, Args)]
pub struct AttnArgs {
    /// Transformer checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Token string such as `w1i0r1`.
    #[arg(long, conflicts_with = "data")]
    pub input: Option<String>,
    /// Corpus file; `--index` selects the line.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value = "attn")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFile {
    pub layer: usize,
    pub head: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnManifest {
    pub sequence: String,
    pub length: usize,
    pub layers: usize,
    pub heads: usize,
    /// 0-indexed positions of `w` instructions.
    pub write_positions: Vec<usize>,
    /// 0-indexed positions of `r` instructions.
    pub read_positions: Vec<usize>,
    pub files: Vec<MatrixFile>,
}

fn input(a: &AttnArgs) -> Result<FflString, CliError> {
    match (&a.input, &a.data) {
        (Some(s), _) => {
            let toks = ffl::parse_tokens(s).map_err(|e| CliError::Usage(e.to_string()))?;
            FflString::new(toks).map_err(|e| CliError::Usage(e.to_string()))
        }
        (None, Some(p)) => {
            let mut c = load_corpus(p, LoadMode::Permissive).map_err(dataset_err)?;
            if a.index >= c.sequences.len() {
                return Err(CliError::Usage(format!(
                    "--index {} but the corpus has {} sequences",
                    a.index,
                    c.sequences.len()
                )));
            }
            Ok(c.sequences.swap_remove(a.index))
        }
        (None, None) => Err(CliError::Usage("give --input or --data".into())),
    }
}

pub fn cmd_attn_dump(a: &AttnArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let s = input(a)?;
    let (_, records) = model
        .infer(&[s.indices()])
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let record = records
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Usage("the model has no attention layers".into()))?;
    let mut files = Vec::new();
    for (l, heads) in record.layers.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            let name = format!("layer{l}_head{h}.csv");
            let mut text = String::with_capacity(m.rows() * m.cols() * 8);
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|x| x.to_string()).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            write_file(&a.out_dir.join(&name), text)?;
            files.push(MatrixFile {
                layer: l,
                head: h,
                file: name,
            });
        }
    }
    let positions = |tok: Token| -> Vec<usize> {
        s.tokens()
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tok)
            .map(|(i, _)| i)
            .collect()
    };
    let manifest = AttnManifest {
        sequence: s.to_string(),
        length: s.len(),
        layers: record.layers.len(),
        heads: record.layers.first().map_or(0, Vec::len),
        write_positions: positions(Token::Write),
        read_positions: positions(Token::Read),
        files,
    };
    write_file(&a.out_dir.join("manifest.json"), to_json(&manifest))?;
    outln!("{} matrices written to {}", manifest.files.len(), a.out_dir.display());
    Ok(())
}
