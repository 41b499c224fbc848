//! `theory`: numerical checks of the attention results. Each suite prints a
//! one-line verdict followed by a JSON record and exits 1 on failure.

use std::path::PathBuf;

use clap::{Args, Subcommand};
use ffb_core::ffl::FflParams;
use ffb_core::models::prop1::default_c;
use ffb_core::theory::{
    dilution_bound_check, dilution_suite, drift_flip, prop1_layer2_orthogonality, prop1_verify,
    transformer_orthogonality, DilutionInstance, DriftInstance, DriftPattern, Prop1Suite,
};
use nalgebra::DMatrix;
use serde_json::json;

use crate::eval::load_model;
use crate::{to_json, write_file, CliError};

#[derive(Debug, Clone, Args)]
pub struct TheoryArgs {
    #[command(subcommand)]
    pub suite: TheorySuite,
    /// Also write the JSON record here.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum TheorySuite {
    /// Attention dilution bound on random instances plus the uniform case.
    Dilution {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score drift of one-layer attention with a linear position coordinate.
    Drift {
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        /// Write-token score advantage.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 512.0)]
        t_max: f64,
        /// Largest length searched.
        #[arg(long, default_value_t = 4096)]
        t_cap: usize,
        /// case1 | case2
        #[arg(long, default_value = "case1")]
        pattern: String,
    },
    /// The hand-built two-layer model against the oracle.
    Prop1 {
        /// Longest string of the exhaustive suite, or length of random strings.
        #[arg(long = "T", default_value_t = 12)]
        length: usize,
        #[arg(long, conflicts_with = "random")]
        exhaustive: bool,
        /// Number of random sequences.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        p_i: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Temperature constant (default depends on `--T`).
        #[arg(long)]
        c: Option<f64>,
    },
    /// Position-coordinate orthogonality of a checkpoint or the construction.
    Ortho {
        #[arg(long, conflicts_with = "prop1")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prop1: bool,
        #[arg(long = "T", default_value_t = 512)]
        length: usize,
    },
}

fn parse_pattern(s: &str) -> Result<DriftPattern, CliError> {
    match s {
        "case1" => Ok(DriftPattern::Case1),
        "case2" => Ok(DriftPattern::Case2),
        _ => Err(CliError::Usage(format!("unknown pattern {s:?} (case1 | case2)"))),
    }
}

fn emit(args: &TheoryArgs, pass: bool, summary: String, record: serde_json::Value) -> Result<(), CliError> {
    outln!("{} {summary}", if pass { "PASS" } else { "FAIL" });
    let text = to_json(&record);
    out!("{text}");
    if let Some(p) = &args.json {
        write_file(p, &text)?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Check(summary))
    }
}

fn theory_err(e: ffb_core::theory::TheoryError) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn cmd_theory(a: &TheoryArgs) -> Result<(), CliError> {
    match &a.suite {
        TheorySuite::Dilution { n, seed } => {
            let suite = dilution_suite(*seed, *n);
            let mut uniform = Vec::new();
            for t in [1usize, 2, 7, 100, 4096] {
                let inst = DilutionInstance::new(
                    DMatrix::zeros(2, 3),
                    DMatrix::zeros(2, 3),
                    vec![nalgebra::DVector::from_element(3, 0.5); t],
                )
                .map_err(theory_err)?;
                uniform.push(dilution_bound_check(&inst));
            }
            let equal = uniform.iter().all(|c| {
                let u = 1.0 / c.t as f64;
                (c.max_weight - u).abs() <= 1e-12 && (c.bound - u).abs() <= 1e-12
            });
            let pass = suite.violations.is_empty() && equal;
            emit(
                a,
                pass,
                format!(
                    "{} violations in {} instances, uniform case {}",
                    suite.violations.len(),
                    suite.instances,
                    if equal { "attains the bound" } else { "misses the bound" }
                ),
                json!({ "suite": suite, "uniform": uniform, "pass": pass }),
            )
        }
        TheorySuite::Drift {
            rho,
            alpha,
            t_max,
            t_cap,
            pattern,
        } => {
            let inst = DriftInstance::canonical(*rho, *alpha, *t_max);
            let pattern = parse_pattern(pattern)?;
            let r = drift_flip(&inst, &pattern, *t_cap);
            let summary = match (r.crossover, r.first_wrong) {
                (Some(t), _) => format!("crossover at T = {t}"),
                (None, Some(t)) => format!("argmax wrong at T = {t}"),
                (None, None) => format!("no crossover up to T = {t_cap}"),
            };
            let pass = r.holds;
            let record = json!({
                "alpha": alpha,
                "t_max": t_max,
                "pattern": pattern,
                "result": r,
                "pass": pass,
            });
            emit(a, pass, summary, record)
        }
        TheorySuite::Prop1 {
            length,
            exhaustive,
            random,
            p_i,
            seed,
            c,
        } => {
            let suite = match (exhaustive, random) {
                (_, Some(n)) => Prop1Suite::Randomized {
                    n: *n,
                    params: FflParams::ffl_with_length(*p_i, *length),
                    seed: *seed,
                },
                _ => Prop1Suite::Exhaustive { t_cap: *length },
            };
            let c = c.unwrap_or_else(|| default_c(*length));
            let report = prop1_verify(c, *length, &suite).map_err(theory_err)?;
            let pass = report.passed();
            emit(
                a,
                pass,
                format!(
                    "{} counterexamples in {} sequences ({} reads)",
                    report.n_failures, report.sequences, report.reads
                ),
                serde_json::to_value(&report).expect("serializable"),
            )
        }
        TheorySuite::Ortho {
            checkpoint,
            prop1,
            length,
        } => {
            let heads = match (checkpoint, prop1) {
                (Some(p), _) => transformer_orthogonality(&load_model(p)?).map_err(theory_err)?,
                (None, true) => vec![prop1_layer2_orthogonality(default_c(*length), *length).map_err(theory_err)?],
                (None, false) => return Err(CliError::Usage("give --checkpoint or --prop1".into())),
            };
            let worst = heads.iter().map(|o| o.relative).fold(0.0, f64::max);
            emit(
                a,
                true,
                format!("largest relative |rho| {worst}"),
                json!({ "heads": heads }),
            )
        }
    }
}
