//! Explicit two-layer, one-head transformer that solves clean-mode flip-flop
//! prediction over binary data.
//!
//! Embedding coordinates (0-indexed): 0 = `w`, 1 = `r` or `i`, 2 = data 0,
//! 3 = data 1, 4 = constant 1, 5 = position `t / T_max` (`t` from 1),
//! 6 = scratch flag written by layer 1.
//!
//! Layer 1 sets the flag on each `w` and on the token right after it.
//! Layer 2 attends to the latest flagged position and copies its data bit into
//! coordinate 0. Both layers round their attention output with the hinge
//! `relu(3v - 1) - relu(3v - 2)`; layer 1 adds a residual connection.

use super::{AttentionRecord, ModelError};
use crate::ffl::{self, Token};
use crate::tensor::Tensor;

pub const DIM: usize = 7;
pub const KEY_DIM: usize = 2;
/// Coordinate holding `t / T_max`.
pub const POS_COORD: usize = 5;
const FLAG_COORD: usize = 6;
const OUT_COORD: usize = 0;

/// One attention layer: `W_Q`, `W_K`, `W_V` are `7 x 2`, `W_C` is `2 x 7`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Layer {
    pub w_q: Tensor<f64>,
    pub w_k: Tensor<f64>,
    pub w_v: Tensor<f64>,
    pub w_c: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Construction {
    pub c: f64,
    pub t_max: usize,
    pub layers: [Prop1Layer; 2],
}

/// `8 T ln T` (with `T` floored at 2).
pub fn default_c(t_max: usize) -> f64 {
    let t = t_max.max(2) as f64;
    8.0 * t * t.ln()
}

fn mat(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[rows, cols]);
    for &(i, j, v) in entries {
        t.data_mut()[i * cols + j] = v;
    }
    t
}

pub fn build_prop1_model(c: f64, t_max: usize) -> Result<Prop1Construction, ModelError> {
    if !(c > 0.0 && c.is_finite()) || t_max == 0 {
        return Err(ModelError::Config(format!("need c > 0 and T_max > 0, got c = {c}, T_max = {t_max}")));
    }
    let t = t_max as f64;
    let query = mat(DIM, KEY_DIM, &[(4, 0, 1.0), (4, 1, 1.0)]);
    let layer1 = Prop1Layer {
        w_q: query.clone(),
        w_k: mat(DIM, KEY_DIM, &[(0, 0, 1.5 * c / t), (POS_COORD, 1, c)]),
        w_v: mat(DIM, KEY_DIM, &[(0, 0, 1.0)]),
        w_c: mat(KEY_DIM, DIM, &[(0, FLAG_COORD, 1.0)]),
    };
    let layer2 = Prop1Layer {
        w_q: query,
        w_k: mat(DIM, KEY_DIM, &[(FLAG_COORD, 0, c), (POS_COORD, 1, c)]),
        w_v: mat(DIM, KEY_DIM, &[(3, 0, 1.0)]),
        w_c: mat(KEY_DIM, DIM, &[(0, OUT_COORD, 1.0)]),
    };
    Ok(Prop1Construction {
        c,
        t_max,
        layers: [layer1, layer2],
    })
}

fn hinge(v: f64) -> f64 {
    (3.0 * v - 1.0).max(0.0) - (3.0 * v - 2.0).max(0.0)
}

/// Causal row softmax of `q kᵀ`, returned with `softmax(...) v`.
fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let n = q.rows();
    let scores = q.matmul(&k.transpose()).expect("shapes");
    let mut probs = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = &scores.row(i)[..=i];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            probs.data_mut()[i * n + j] = e / z;
        }
    }
    let out = probs.matmul(v).expect("shapes");
    (probs, out)
}

#[derive(Debug, Clone)]
pub struct Prop1Output {
    /// Coordinate 0 of the final representation at every position.
    pub y: Vec<f64>,
    pub record: AttentionRecord,
}

impl Prop1Construction {
    pub fn embed(&self, tokens: &[Token]) -> Result<Tensor<f64>, ModelError> {
        if tokens.len() > self.t_max {
            return Err(ModelError::TooLong {
                len: tokens.len(),
                max: self.t_max,
            });
        }
        let mut e = Tensor::zeros(&[tokens.len(), DIM]);
        for (i, tok) in tokens.iter().enumerate() {
            let row = &mut e.data_mut()[i * DIM..(i + 1) * DIM];
            match tok {
                Token::Write => row[0] = 1.0,
                Token::Read | Token::Ignore => row[1] = 1.0,
                Token::Data(0) => row[2] = 1.0,
                Token::Data(1) => row[3] = 1.0,
                Token::Data(_) => {
                    return Err(ModelError::Vocab {
                        token: tok.index(),
                        vocab: ffl::vocab_size(2),
                    })
                }
            }
            row[4] = 1.0;
            row[POS_COORD] = (i + 1) as f64 / self.t_max as f64;
        }
        Ok(e)
    }

    fn layer(&self, l: usize, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let p = &self.layers[l];
        let q = x.matmul(&p.w_q).expect("shapes");
        let k = x.matmul(&p.w_k).expect("shapes");
        let v = x.matmul(&p.w_v).expect("shapes");
        let (probs, mixed) = attend(&q, &k, &v);
        let out = mixed.matmul(&p.w_c).expect("shapes").map(hinge);
        (probs, out)
    }

    pub fn forward(&self, tokens: &[Token]) -> Result<Prop1Output, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        let e = self.embed(tokens)?;
        let (a1, o1) = self.layer(0, &e);
        let f1 = Tensor::new(
            e.shape().to_vec(),
            e.data().iter().zip(o1.data()).map(|(a, b)| a + b).collect(),
        )?;
        let (a2, o2) = self.layer(1, &f1);
        let y = (0..tokens.len()).map(|i| o2.at(i, OUT_COORD)).collect();
        Ok(Prop1Output {
            y,
            record: AttentionRecord {
                layers: vec![vec![a1], vec![a2]],
            },
        })
    }

    /// Logits over the binary vocabulary: data-1 gets `y - 1/2`, data-0 gets
    /// `1/2 - y`, instructions get a large negative constant.
    pub fn logits(&self, tokens: &[Token]) -> Result<Tensor<f64>, ModelError> {
        let out = self.forward(tokens)?;
        let v = ffl::vocab_size(2);
        let mut t = Tensor::full(&[tokens.len(), v], -1e9);
        for (i, y) in out.y.iter().enumerate() {
            t.data_mut()[i * v + Token::Data(0).index()] = 0.5 - y;
            t.data_mut()[i * v + Token::Data(1).index()] = y - 0.5;
        }
        Ok(t)
    }

    /// Decoded bit at every read position, as `(position, bit)`.
    pub fn predict_reads(&self, tokens: &[Token]) -> Result<Vec<(usize, u8)>, ModelError> {
        let out = self.forward(tokens)?;
        Ok(tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Token::Read)
            .map(|(i, _)| (i, u8::from(out.y[i] > 0.5)))
            .collect())
    }
}
