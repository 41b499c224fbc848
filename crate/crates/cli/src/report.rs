//! `report`: replicate statistics of error rates across run directories.

use std::path::{Path, PathBuf};

use clap::Args;
use ffb_core::evaluation::{replicate_stats, ReplicateStats};

use crate::run::{FinalEval, FINAL_EVAL_FILE};
use crate::{io_error, write_file, CliError};

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories, or directories searched recursively for runs.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// in_distribution | sparse | dense | all
    #[arg(long, default_value = "sparse")]
    pub metric: String,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Every directory at or below `dir` that holds a final evaluation, sorted.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join(FINAL_EVAL_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_error(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_error(dir)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    let mut runs = Vec::new();
    for e in entries {
        if e.is_dir() {
            runs.extend(find_runs(&e)?);
        }
    }
    Ok(runs)
}

pub fn read_final_eval(dir: &Path) -> Result<FinalEval, CliError> {
    let p = dir.join(FINAL_EVAL_FILE);
    let text = std::fs::read_to_string(&p).map_err(io_error(&p))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

/// One row per metric over all runs found under `dirs`.
pub fn report_table(dirs: &[PathBuf], metrics: &[&str]) -> Result<Vec<(String, ReplicateStats)>, CliError> {
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(find_runs(d)?);
    }
    if runs.is_empty() {
        return Err(CliError::Usage("no run directories found".into()));
    }
    let evals = runs.iter().map(|r| read_final_eval(r)).collect::<Result<Vec<_>, _>>()?;
    metrics
        .iter()
        .map(|&m| {
            let rates = runs
                .iter()
                .zip(&evals)
                .map(|(r, e)| {
                    e.rate(m)
                        .ok_or_else(|| CliError::Usage(format!("{}: no {m} result", r.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let stats = replicate_stats(&rates).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((m.to_string(), stats))
        })
        .collect()
}

pub fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let metrics: Vec<&str> = match a.metric.as_str() {
        "all" => vec!["in_distribution", "sparse", "dense"],
        m @ ("in_distribution" | "sparse" | "dense") => vec![m],
        m => return Err(CliError::Usage(format!("unknown metric {m:?}"))),
    };
    let rows = report_table(&a.dirs, &metrics)?;
    let mut text = format!("metric,{}\n", ReplicateStats::CSV_HEADER);
    for (m, s) in &rows {
        text.push_str(&format!("{m},{}\n", s.csv_row()));
    }
    out!("{text}");
    if let Some(p) = &a.out {
        write_file(p, &text)?;
    }
    Ok(())
}
