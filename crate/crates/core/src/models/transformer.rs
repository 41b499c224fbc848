//! Decoder-only transformer with pre-norm residual blocks.
//!
//! Parameter order per block: `ln1.{gain,bias}`, `attn.qkv.{weight,bias}`,
//! `attn.out.{weight,bias}`, `ln2.{gain,bias}`, `mlp.fc1.{weight,bias}`,
//! `mlp.fc2.{weight,bias}`. Weights are stored `[in, out]`.

use serde::{Deserialize, Serialize};

use super::{normal_tensor, AttnHandle, ForwardOutput, ModelError, ParamSet};
use crate::ffl;
use crate::rng::Pcg32;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Learned,
    Sinusoidal,
    /// No additive position signal.
    Zero,
    /// Token embedding of width `d - 1` plus one coordinate holding `t / T_max`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub max_len: usize,
    pub pos_encoding: PosEncoding,
    pub activation: Activation,
    pub attn_dropout: f64,
    pub mlp_dropout: f64,
    pub emb_dropout: f64,
    /// Softmax temperature; scores are divided by it.
    pub temperature: f64,
    pub vocab: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 512,
            heads: 8,
            max_len: 512,
            pos_encoding: PosEncoding::Learned,
            activation: Activation::Gelu,
            attn_dropout: 0.0,
            mlp_dropout: 0.0,
            emb_dropout: 0.0,
            temperature: 1.0,
            vocab: ffl::vocab_size(2),
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.max_len == 0 || self.vocab == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.pos_encoding == PosEncoding::Linear && self.d_model < 2 {
            return bad("linear position encoding needs d_model >= 2".into());
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("mlp_dropout", self.mlp_dropout),
            ("emb_dropout", self.emb_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn token_width(&self) -> usize {
        match self.pos_encoding {
            PosEncoding::Linear => self.d_model - 1,
            _ => self.d_model,
        }
    }
}

pub(crate) fn init(c: &TransformerConfig, rng: &mut Pcg32) -> ParamSet<f64> {
    let d = c.d_model;
    let mut p = ParamSet::new();
    let w = |p: &mut ParamSet<f64>, name: String, shape: &[usize], rng: &mut Pcg32| {
        p.push(name, normal_tensor(shape, INIT_STD, rng));
    };
    w(&mut p, "tok_emb".into(), &[c.vocab, c.token_width()], rng);
    if c.pos_encoding == PosEncoding::Learned {
        w(&mut p, "pos_emb".into(), &[c.max_len, d], rng);
    }
    for l in 0..c.layers {
        let pre = format!("layers.{l}");
        p.push(format!("{pre}.ln1.gain"), Tensor::full(&[d], 1.0));
        p.push(format!("{pre}.ln1.bias"), Tensor::zeros(&[d]));
        w(&mut p, format!("{pre}.attn.qkv.weight"), &[d, 3 * d], rng);
        p.push(format!("{pre}.attn.qkv.bias"), Tensor::zeros(&[3 * d]));
        w(&mut p, format!("{pre}.attn.out.weight"), &[d, d], rng);
        p.push(format!("{pre}.attn.out.bias"), Tensor::zeros(&[d]));
        p.push(format!("{pre}.ln2.gain"), Tensor::full(&[d], 1.0));
        p.push(format!("{pre}.ln2.bias"), Tensor::zeros(&[d]));
        w(&mut p, format!("{pre}.mlp.fc1.weight"), &[d, 4 * d], rng);
        p.push(format!("{pre}.mlp.fc1.bias"), Tensor::zeros(&[4 * d]));
        w(&mut p, format!("{pre}.mlp.fc2.weight"), &[4 * d, d], rng);
        p.push(format!("{pre}.mlp.fc2.bias"), Tensor::zeros(&[d]));
    }
    p.push("ln_f.gain", Tensor::full(&[d], 1.0));
    p.push("ln_f.bias", Tensor::zeros(&[d]));
    w(&mut p, "head.weight".into(), &[d, c.vocab], rng);
    p.push("head.bias", Tensor::zeros(&[c.vocab]));
    p
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`, `t` from 0.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn(&[len, d], |k| {
        let (t, j) = (k / d, k % d);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        let a = t as f64 * freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

pub(crate) fn forward<F: Real>(
    c: &TransformerConfig,
    g: &mut Graph<F>,
    vars: &[Var],
    batch: &[Vec<usize>],
    len: usize,
    training: bool,
    rng: &mut Pcg32,
) -> Result<ForwardOutput, ModelError> {
    let d = c.d_model;
    let dh = c.head_dim();
    let n_batch = batch.len();
    let mut p = Cursor { vars, next: 0 };
    let flat: Vec<usize> = batch.iter().flatten().copied().collect();

    let tok = p.take();
    let mut x = g.embedding(tok, &flat)?;
    match c.pos_encoding {
        PosEncoding::Learned => {
            let pos = p.take();
            let idx: Vec<usize> = (0..n_batch).flat_map(|_| 0..len).collect();
            let pe = g.embedding(pos, &idx)?;
            x = g.add(x, pe)?;
        }
        PosEncoding::Sinusoidal => {
            let table = sinusoidal_table(len, d);
            let rows: Vec<F> = (0..n_batch).flat_map(|_| table.data().iter().map(|&v| F::of(v))).collect();
            let pe = g.constant(Tensor::new(vec![n_batch * len, d], rows)?);
            x = g.add(x, pe)?;
        }
        PosEncoding::Zero => {}
        PosEncoding::Linear => {
            let col: Vec<F> = (0..n_batch)
                .flat_map(|_| (1..=len).map(|t| F::of(t as f64 / c.max_len as f64)))
                .collect();
            let pe = g.constant(Tensor::new(vec![n_batch * len, 1], col)?);
            x = g.concat_cols(&[x, pe])?;
        }
    }
    x = g.dropout(x, c.emb_dropout, training, rng)?;

    let softmax_temp = c.temperature * (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(c.layers * c.heads * n_batch);
    for layer in 0..c.layers {
        let (ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o) = (p.take(), p.take(), p.take(), p.take(), p.take(), p.take());
        let (ln2_g, ln2_b, w1, b1, w2, b2) = (p.take(), p.take(), p.take(), p.take(), p.take(), p.take());

        let h = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
        let qkv = g.matmul(h, w_qkv)?;
        let qkv = g.add_row(qkv, b_qkv)?;
        let mut per_batch = Vec::with_capacity(n_batch);
        for b in 0..n_batch {
            let rows = b * len..(b + 1) * len;
            let mut heads = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let q = g.slice(qkv, rows.clone(), head * dh..(head + 1) * dh)?;
                let k = g.slice(qkv, rows.clone(), d + head * dh..d + (head + 1) * dh)?;
                let v = g.slice(qkv, rows.clone(), 2 * d + head * dh..2 * d + (head + 1) * dh)?;
                let scores = g.matmul_nt(q, k)?;
                let probs = g.softmax_rows(scores, softmax_temp, true)?;
                attention.push(AttnHandle {
                    layer,
                    head,
                    batch: b,
                    probs,
                });
                let dropped = g.dropout(probs, c.attn_dropout, training, rng)?;
                heads.push(g.matmul(dropped, v)?);
            }
            per_batch.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let merged = if per_batch.len() == 1 {
            per_batch[0]
        } else {
            g.concat_rows(&per_batch)?
        };
        let a = g.matmul(merged, w_o)?;
        let a = g.add_row(a, b_o)?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        let m = g.matmul(h, w1)?;
        let m = g.add_row(m, b1)?;
        let m = match c.activation {
            Activation::Relu => g.relu(m),
            Activation::Gelu => g.gelu(m),
        };
        let m = g.matmul(m, w2)?;
        let m = g.add_row(m, b2)?;
        let m = g.dropout(m, c.mlp_dropout, training, rng)?;
        x = g.add(x, m)?;
    }
    let (lnf_g, lnf_b, w_head, b_head) = (p.take(), p.take(), p.take(), p.take());
    let h = g.layer_norm(x, lnf_g, lnf_b, LAYER_NORM_EPS)?;
    let logits = g.matmul(h, w_head)?;
    let logits = g.add_row(logits, b_head)?;
    Ok(ForwardOutput {
        logits,
        seq_len: len,
        attention,
    })
}
