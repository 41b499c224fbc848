//! Stacked LSTM language model. Gate order within the `4H` blocks is
//! input, forget, cell, output. Each layer carries two bias vectors.

use serde::{Deserialize, Serialize};

use super::{normal_tensor, uniform_tensor, ForwardOutput, ModelError, ParamSet};
use crate::ffl;
use crate::rng::Pcg32;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub vocab: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 1,
            vocab: ffl::vocab_size(2),
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.layers == 0 || self.vocab == 0 {
            return Err(ModelError::Config("LSTM dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding rows ~ N(0, 1); every recurrent and output weight and bias
/// ~ U(-1/sqrt(H), 1/sqrt(H)).
pub(crate) fn init(c: &LstmConfig, rng: &mut Pcg32) -> ParamSet<f64> {
    let h = c.hidden;
    let bound = 1.0 / (h as f64).sqrt();
    let mut p = ParamSet::new();
    p.push("emb", normal_tensor(&[c.vocab, h], 1.0, rng));
    for l in 0..c.layers {
        p.push(format!("layers.{l}.w_ih"), uniform_tensor(&[h, 4 * h], bound, rng));
        p.push(format!("layers.{l}.w_hh"), uniform_tensor(&[h, 4 * h], bound, rng));
        p.push(format!("layers.{l}.b_ih"), uniform_tensor(&[4 * h], bound, rng));
        p.push(format!("layers.{l}.b_hh"), uniform_tensor(&[4 * h], bound, rng));
    }
    p.push("head.weight", uniform_tensor(&[h, c.vocab], bound, rng));
    p.push("head.bias", uniform_tensor(&[c.vocab], bound, rng));
    p
}

pub(crate) fn forward<F: Real>(
    c: &LstmConfig,
    g: &mut Graph<F>,
    vars: &[Var],
    batch: &[Vec<usize>],
    len: usize,
) -> Result<ForwardOutput, ModelError> {
    let h = c.hidden;
    let nb = batch.len();
    // time-major rows: t * nb + b
    let idx: Vec<usize> = (0..len).flat_map(|t| batch.iter().map(move |s| s[t])).collect();
    let mut x = g.embedding(vars[0], &idx)?;
    for l in 0..c.layers {
        let base = 1 + 4 * l;
        let (w_ih, w_hh, b_ih, b_hh) = (vars[base], vars[base + 1], vars[base + 2], vars[base + 3]);
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add_row(xw, b_ih)?;
        let xw = g.add_row(xw, b_hh)?;
        let mut h_t: Option<Var> = None;
        let mut c_t = g.constant(Tensor::zeros(&[nb, h]));
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let mut gates = g.slice(xw, t * nb..(t + 1) * nb, 0..4 * h)?;
            if let Some(prev) = h_t {
                let hw = g.matmul(prev, w_hh)?;
                gates = g.add(gates, hw)?;
            }
            let i = g.slice(gates, 0..nb, 0..h)?;
            let f = g.slice(gates, 0..nb, h..2 * h)?;
            let cc = g.slice(gates, 0..nb, 2 * h..3 * h)?;
            let o = g.slice(gates, 0..nb, 3 * h..4 * h)?;
            let (i, f, cc, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cc), g.sigmoid(o));
            let keep = g.mul(f, c_t)?;
            let write = g.mul(i, cc)?;
            c_t = g.add(keep, write)?;
            let squashed = g.tanh(c_t);
            let h_new = g.mul(o, squashed)?;
            outs.push(h_new);
            h_t = Some(h_new);
        }
        x = g.concat_rows(&outs)?;
    }
    // back to batch-major rows: b * len + t
    let order: Vec<usize> = (0..nb).flat_map(|b| (0..len).map(move |t| t * nb + b)).collect();
    let hb = g.embedding(x, &order)?;
    let n = vars.len();
    let logits = g.matmul(hb, vars[n - 2])?;
    let logits = g.add_row(logits, vars[n - 1])?;
    Ok(ForwardOutput {
        logits,
        seq_len: len,
        attention: Vec::new(),
    })
}
