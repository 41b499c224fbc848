//! Numerical checks of the attention results: softmax dilution under bounded
//! scores, score drift with linear position encodings, and exhaustive or
//! randomized verification of the explicit two-layer construction.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ffl::{self, FflParams, FflString};
use crate::models::prop1::{build_prop1_model, POS_COORD};
use crate::models::{ModelError, SequenceModel};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("latent {index} has norm {norm} > 1")]
    LatentNorm { index: usize, norm: f64 },
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

const NORM_SLACK: f64 = 1e-12;

/// Softmax tolerance used by [`dilution_bound_check`].
pub const DILUTION_TOL: f64 = 1e-9;

/// Query/key factors `W_Q, W_K` (each `k x d`) and latents `v_1..v_T`.
#[derive(Debug, Clone)]
pub struct DilutionInstance {
    w_q: DMatrix<f64>,
    w_k: DMatrix<f64>,
    latents: Vec<DVector<f64>>,
}

impl DilutionInstance {
    pub fn new(w_q: DMatrix<f64>, w_k: DMatrix<f64>, latents: Vec<DVector<f64>>) -> Result<Self, TheoryError> {
        if w_q.shape() != w_k.shape() {
            return Err(TheoryError::Instance("W_Q and W_K shapes differ".into()));
        }
        if latents.is_empty() {
            return Err(TheoryError::Instance("need at least one latent".into()));
        }
        for (index, v) in latents.iter().enumerate() {
            if v.len() != w_q.ncols() {
                return Err(TheoryError::Instance(format!("latent {index} has wrong dimension")));
            }
            let norm = v.norm();
            if norm > 1.0 + NORM_SLACK {
                return Err(TheoryError::LatentNorm { index, norm });
            }
        }
        Ok(Self { w_q, w_k, latents })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// `W_Kᵀ W_Q`, a `d x d` matrix.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        self.w_k.transpose() * &self.w_q
    }

    pub fn sigma_max(&self) -> f64 {
        let m = self.score_matrix();
        if m.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        m.singular_values().max()
    }

    /// Softmax over `v_τᵀ W_Kᵀ W_Q v_T` for τ = 1..T.
    pub fn attention(&self) -> Vec<f64> {
        let q = self.score_matrix() * self.latents.last().expect("non-empty");
        let scores: Vec<f64> = self.latents.iter().map(|v| v.dot(&q)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }
}

/// `1 - (T-1) / (T-1 + exp(2 σ_max))`.
pub fn dilution_bound(t: usize, sigma_max: f64) -> f64 {
    let t1 = (t - 1) as f64;
    let e = (2.0 * sigma_max).exp();
    if e.is_infinite() {
        return 1.0;
    }
    1.0 - t1 / (t1 + e)
}

#[derive(Debug, Clone, Serialize)]
pub struct DilutionCheck {
    pub t: usize,
    pub sigma_max: f64,
    pub max_weight: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn dilution_bound_check(inst: &DilutionInstance) -> DilutionCheck {
    let sigma_max = inst.sigma_max();
    let max_weight = inst.attention().into_iter().fold(0.0, f64::max);
    let bound = dilution_bound(inst.len(), sigma_max);
    DilutionCheck {
        t: inst.len(),
        sigma_max,
        max_weight,
        bound,
        holds: max_weight <= bound + DILUTION_TOL,
    }
}

fn normal_matrix(r: usize, c: usize, g: &mut rng::Pcg32) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(g))
}

/// Uniform draw from the closed unit ball in `d` dimensions.
fn unit_ball(d: usize, g: &mut rng::Pcg32) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(g));
        let n = v.norm();
        if n > 0.0 {
            let r = rng::unit_f64(g).powf(1.0 / d as f64);
            return v * (r / n);
        }
    }
}

/// Normal factors rescaled so that `σ_max(W_Kᵀ W_Q) = sigma`, with `t`
/// latents from the unit ball.
pub fn random_dilution_instance(seed: u64, t: usize, d: usize, k: usize, sigma: f64) -> DilutionInstance {
    let mut g = rng::pcg(seed);
    let mut w_q = normal_matrix(k, d, &mut g);
    let mut w_k = normal_matrix(k, d, &mut g);
    let s = (w_k.transpose() * &w_q).singular_values().max();
    if s > 0.0 {
        let f = (sigma / s).sqrt();
        w_q *= f;
        w_k *= f;
    }
    let latents = (0..t).map(|_| unit_ball(d, &mut g)).collect();
    DilutionInstance::new(w_q, w_k, latents).expect("latents lie in the unit ball")
}

#[derive(Debug, Clone, Serialize)]
pub struct DilutionSuite {
    pub instances: usize,
    pub violations: Vec<DilutionCheck>,
    /// Largest `max_weight - bound` seen.
    pub worst_margin: f64,
}

/// Random instances with `T` in `8..=2048`, `d` in `2..=16`, `k` in `1..=d`
/// and `σ_max` in `[0, 4)`.
pub fn dilution_suite(master_seed: u64, n: usize) -> DilutionSuite {
    let checks: Vec<DilutionCheck> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_seed(master_seed, i as u64);
            let mut g = rng::pcg(rng::mix64(seed));
            let t = 8 + rng::below(&mut g, 2041) as usize;
            let d = 2 + rng::below(&mut g, 15) as usize;
            let k = 1 + rng::below(&mut g, d as u32) as usize;
            let sigma = 4.0 * rng::unit_f64(&mut g);
            dilution_bound_check(&random_dilution_instance(seed, t, d, k, sigma))
        })
        .collect();
    let worst_margin = checks
        .iter()
        .map(|c| c.max_weight - c.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    DilutionSuite {
        instances: n,
        violations: checks.into_iter().filter(|c| !c.holds).collect(),
        worst_margin,
    }
}

/// One-layer, one-head attention over `[e_t, t / T_max]` inputs. `W_Q` and
/// `W_K` are `k x d`; their last column multiplies the position coordinate.
#[derive(Debug, Clone)]
pub struct DriftInstance {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    /// Embeddings of tokens 0 (hold), 1 and 2 (writes), each of length `d - 1`.
    pub embeddings: [DVector<f64>; 3],
    pub t_max: f64,
}

impl DriftInstance {
    pub fn new(
        w_q: DMatrix<f64>,
        w_k: DMatrix<f64>,
        embeddings: [DVector<f64>; 3],
        t_max: f64,
    ) -> Result<Self, TheoryError> {
        let d = w_q.ncols();
        if w_q.shape() != w_k.shape() || d < 2 {
            return Err(TheoryError::Instance("W_Q and W_K must share a k x d shape with d >= 2".into()));
        }
        if embeddings.iter().any(|e| e.len() != d - 1) {
            return Err(TheoryError::Instance("embeddings must have length d - 1".into()));
        }
        if !(t_max > 0.0) {
            return Err(TheoryError::Instance("T_max must be positive".into()));
        }
        Ok(Self {
            w_q,
            w_k,
            embeddings,
            t_max,
        })
    }

    /// Unit basis embeddings in three dimensions, `k = 2`. Under a hold-token
    /// query, write tokens score `alpha` and hold tokens 0; the only position
    /// interaction is `W_Qpᵀ W_Kp = rho`, all cross terms vanish.
    pub fn canonical(rho: f64, alpha: f64, t_max: f64) -> Self {
        let mut w_q = DMatrix::zeros(2, 4);
        let mut w_k = DMatrix::zeros(2, 4);
        w_q[(0, 0)] = 1.0;
        w_k[(0, 1)] = alpha;
        w_k[(0, 2)] = alpha;
        w_q[(1, 3)] = 1.0;
        w_k[(1, 3)] = rho;
        let e = |i: usize| DVector::from_fn(3, |r, _| if r == i { 1.0 } else { 0.0 });
        Self::new(w_q, w_k, [e(0), e(1), e(2)], t_max).expect("well-formed")
    }

    pub fn dim(&self) -> usize {
        self.w_q.ncols()
    }

    /// `W_Qpᵀ W_Kp`.
    pub fn rho(&self) -> f64 {
        let d = self.dim();
        self.w_q.column(d - 1).dot(&self.w_k.column(d - 1))
    }

    fn input(&self, token: u8, pos: usize) -> DVector<f64> {
        let e = &self.embeddings[token as usize];
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, e.len()).copy_from(e);
        v[self.dim() - 1] = pos as f64 / self.t_max;
        v
    }

    /// `<W_Q v_i, W_K v_j>` with 1-indexed positions.
    pub fn score(&self, i: usize, tok_i: u8, j: usize, tok_j: u8) -> f64 {
        (&self.w_q * self.input(tok_i, i)).dot(&(&self.w_k * self.input(tok_j, j)))
    }
}

/// Token layouts for [`drift_scores`]; unlisted positions hold token 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftPattern {
    /// Token 1 at position 1.
    Case1,
    /// Token 1 at position 1 and token 2 at position `T - 1`.
    Case2,
    /// Explicit `(position, token)` writes, positions 1-indexed.
    Custom(Vec<(usize, u8)>),
}

impl DriftPattern {
    /// Token 1, 32 holds, token 2, then 800 holds (length 834).
    pub fn long_hold() -> Self {
        Self::Custom(vec![(1, 1), (34, 2)])
    }

    fn writes(&self, t: usize) -> Vec<(usize, u8)> {
        let mut w = match self {
            Self::Case1 => vec![(1, 1)],
            Self::Case2 => vec![(1, 1), (t - 1, 2)],
            Self::Custom(w) => w.clone(),
        };
        w.retain(|&(p, _)| p >= 1 && p <= t);
        w.sort_unstable();
        w.dedup_by_key(|x| x.0);
        w
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftScores {
    pub t: usize,
    pub s_first: f64,
    pub s_prev: f64,
    pub s_last: f64,
    /// Highest-scoring key position (earliest on ties).
    pub argmax: usize,
    /// Position of the latest write, the correct target.
    pub target: Option<usize>,
}

impl DriftScores {
    pub fn correct(&self) -> bool {
        self.target == Some(self.argmax)
    }
}

/// Scores of the query at position `T` against positions 1, `T - 1` and
/// `T`, and the argmax over all `1..=T`.
///
/// Within a run of hold tokens the score is affine in the key position, so
/// only run endpoints need to be compared.
pub fn drift_scores(inst: &DriftInstance, pattern: &DriftPattern, t: usize) -> DriftScores {
    assert!(t >= 2, "need T >= 2");
    let writes = pattern.writes(t);
    let token_at = |p: usize| writes.iter().find(|w| w.0 == p).map_or(0, |w| w.1);
    let q_tok = token_at(t);
    let s = |j: usize| inst.score(t, q_tok, j, token_at(j));

    let mut candidates: Vec<usize> = writes.iter().map(|w| w.0).collect();
    let mut start = 1;
    for &(p, _) in writes.iter().chain(std::iter::once(&(t + 1, 0))) {
        if p > start {
            candidates.push(start);
            candidates.push(p - 1);
        }
        start = p + 1;
    }
    candidates.sort_unstable();
    candidates.dedup();
    let mut argmax = candidates[0];
    let mut best = s(argmax);
    for &j in &candidates[1..] {
        let v = s(j);
        if v > best {
            best = v;
            argmax = j;
        }
    }
    DriftScores {
        t,
        s_first: s(1),
        s_prev: s(t - 1),
        s_last: s(t),
        argmax,
        target: writes.last().map(|w| w.0),
    }
}

/// First `T >= 2` whose argmax misses the target, found by doubling up to
/// `t_cap` and then bisecting. Assumes the error persists once it appears.
pub fn crossover(inst: &DriftInstance, pattern: &DriftPattern, t_cap: usize) -> Option<usize> {
    let wrong = |t: usize| !drift_scores(inst, pattern, t).correct();
    let mut lo = 2;
    if wrong(lo) {
        return Some(lo);
    }
    let mut hi = 4;
    loop {
        if hi > t_cap {
            return None;
        }
        if wrong(hi) {
            break;
        }
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if wrong(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Outcome of [`drift_flip`].
#[derive(Debug, Clone, Serialize)]
pub struct DriftFlip {
    pub rho: f64,
    pub t_cap: usize,
    pub crossover: Option<usize>,
    /// Scores at `T* / 2` and `2 T*` when a crossover exists.
    pub before: Option<DriftScores>,
    pub after: Option<DriftScores>,
    /// With `ρ = 0`, the first length in `2..=t_cap` answered wrongly.
    pub first_wrong: Option<usize>,
    pub holds: bool,
}

/// With `ρ > 0` the crossover must exist, the argmax must be right at half
/// of it and wrong at twice it. With `ρ = 0` every length up to `t_cap` must
/// be answered correctly.
pub fn drift_flip(inst: &DriftInstance, pattern: &DriftPattern, t_cap: usize) -> DriftFlip {
    let rho = inst.rho();
    let t_star = crossover(inst, pattern, t_cap);
    let (mut before, mut after, mut first_wrong) = (None, None, None);
    let holds = if rho != 0.0 {
        match t_star {
            Some(ts) => {
                let b = drift_scores(inst, pattern, (ts / 2).max(2));
                let a = drift_scores(inst, pattern, 2 * ts);
                let ok = (ts / 2 < 2 || b.correct()) && !a.correct();
                before = Some(b);
                after = Some(a);
                ok
            }
            None => false,
        }
    } else {
        first_wrong = (2..=t_cap).find(|&t| !drift_scores(inst, pattern, t).correct());
        first_wrong.is_none()
    };
    DriftFlip {
        rho,
        t_cap,
        crossover: t_star,
        before,
        after,
        first_wrong,
        holds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Orthogonality {
    pub abs_rho: f64,
    /// `|ρ| / (‖W_Qp‖ ‖W_Kp‖)`, 0 when either norm is 0.
    pub relative: f64,
}

/// `w_q` and `w_k` are stored `d x k` (inputs times weight); row `pos`
/// multiplies the position coordinate.
pub fn orthogonality_metric(w_q: &Tensor<f64>, w_k: &Tensor<f64>, pos: usize) -> Orthogonality {
    let (qp, kp) = (w_q.row(pos), w_k.row(pos));
    let rho: f64 = qp.iter().zip(kp).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm(qp) * norm(kp);
    Orthogonality {
        abs_rho: rho.abs(),
        relative: if denom > 0.0 { rho.abs() / denom } else { 0.0 },
    }
}

/// Per-head metric of the first layer of a transformer with linear position
/// encoding (position in the last input coordinate).
pub fn transformer_orthogonality<F: Real>(model: &SequenceModel<F>) -> Result<Vec<Orthogonality>, TheoryError> {
    let crate::models::ModelConfig::Transformer(c) = &model.config else {
        return Err(TheoryError::Instance("orthogonality needs a transformer".into()));
    };
    if c.pos_encoding != crate::models::PosEncoding::Linear {
        return Err(TheoryError::Instance("orthogonality needs linear position encoding".into()));
    }
    let w = model
        .params
        .get("layers.0.attn.qkv.weight")
        .ok_or_else(|| TheoryError::Instance("missing layers.0.attn.qkv.weight".into()))?
        .cast::<f64>();
    let (d, dh) = (c.d_model, c.head_dim());
    Ok((0..c.heads)
        .map(|h| {
            let pick = |off: usize| Tensor::from_fn(&[d, dh], |i| w.at(i / dh, off + h * dh + i % dh));
            orthogonality_metric(&pick(0), &pick(d), d - 1)
        })
        .collect())
}

/// Which strings [`prop1_verify`] runs on.
#[derive(Debug, Clone, PartialEq)]
pub enum Prop1Suite {
    /// Every valid binary string with length at most `t_cap`.
    Exhaustive { t_cap: usize },
    /// `n` samples from `params` (binary data), seeded from `seed`.
    Randomized { n: usize, params: FflParams, seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Failure {
    pub sequence: String,
    /// 0-indexed position of the `r`.
    pub position: usize,
    pub expected: u8,
    pub predicted: u8,
}

#[derive(Debug, Clone, Serialize)]
pub struct Prop1Report {
    pub c: f64,
    pub t_max: usize,
    pub sequences: usize,
    pub reads: usize,
    pub n_failures: usize,
    /// At most [`MAX_REPORTED_FAILURES`] counterexamples.
    pub failures: Vec<Prop1Failure>,
}

impl Prop1Report {
    pub fn passed(&self) -> bool {
        self.n_failures == 0
    }
}

pub const MAX_REPORTED_FAILURES: usize = 100;

/// Compares the construction against `oracle_read` at every read of the suite.
pub fn prop1_verify(c: f64, t_max: usize, suite: &Prop1Suite) -> Result<Prop1Report, TheoryError> {
    let model = build_prop1_model(c, t_max)?;
    let seqs: Vec<FflString> = match suite {
        Prop1Suite::Exhaustive { t_cap } => ffl::enumerate_valid_up_to(*t_cap, 2),
        Prop1Suite::Randomized { n, params, seed } => {
            if params.vocab != 2 {
                return Err(TheoryError::Instance("the construction handles binary data only".into()));
            }
            (0..*n as u64)
                .map(|i| ffl::sample(params, rng::derive_seed(*seed, i)))
                .collect()
        }
    };
    let per_seq: Vec<Result<(usize, Vec<Prop1Failure>), ModelError>> = seqs
        .par_iter()
        .map(|s| {
            let toks = s.tokens();
            let preds = model.predict_reads(toks)?;
            let mut fails = Vec::new();
            for &(pos, bit) in &preds {
                let expected = ffl::oracle_read(&toks[..=pos]).expect("valid string");
                if bit != expected {
                    fails.push(Prop1Failure {
                        sequence: s.to_string(),
                        position: pos,
                        expected,
                        predicted: bit,
                    });
                }
            }
            Ok((preds.len(), fails))
        })
        .collect();
    let mut report = Prop1Report {
        c,
        t_max,
        sequences: seqs.len(),
        reads: 0,
        n_failures: 0,
        failures: Vec::new(),
    };
    for r in per_seq {
        let (reads, fails) = r?;
        report.reads += reads;
        report.n_failures += fails.len();
        let room = MAX_REPORTED_FAILURES - report.failures.len();
        report.failures.extend(fails.into_iter().take(room));
    }
    Ok(report)
}

/// Orthogonality of the construction's second layer.
pub fn prop1_layer2_orthogonality(c: f64, t_max: usize) -> Result<Orthogonality, TheoryError> {
    let m = build_prop1_model(c, t_max)?;
    let l = &m.layers[1];
    Ok(orthogonality_metric(&l.w_q, &l.w_k, POS_COORD))
}

/// Helper for reports: the token string of a drift pattern at length `t`.
pub fn drift_pattern_string(pattern: &DriftPattern, t: usize) -> String {
    let writes = pattern.writes(t);
    (1..=t)
        .map(|p| {
            let tok = writes.iter().find(|w| w.0 == p).map_or(0, |w| w.1);
            char::from(b'0' + tok)
        })
        .collect()
}
