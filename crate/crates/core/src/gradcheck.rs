//! Central finite-difference checks of reverse-mode gradients in `f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::models::{sharpening_term, LstmConfig, ModelConfig, SequenceModel, TransformerConfig};
use crate::rng::{self, Pcg32};
use crate::tensor::{Graph, SharpenKind, Tensor, TensorError, Var};

/// Finite-difference step of the fourth-order central stencil.
pub const STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

/// Largest relative error over every input coordinate, and the number of
/// coordinates compared.
pub fn check(inputs: &[Tensor<f64>], loss: &LossFn<'_>) -> Result<(f64, usize), TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            let mut at = |dx: f64| -> Result<f64, TensorError> {
                work[k].data_mut()[i] = x0 + dx;
                eval(&work)
            };
            let (d1, d2) = (at(STEP)? - at(-STEP)?, at(2.0 * STEP)? - at(-2.0 * STEP)?);
            work[k].data_mut()[i] = x0;
            let numeric = (8.0 * d1 - d2) / (12.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn normal(shape: &[usize], rng: &mut Pcg32) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Normal entries pushed at least `margin` away from zero.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut Pcg32) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v.signum() * (v.abs() + margin)
    })
}

fn dim(rng: &mut Pcg32) -> usize {
    1 + rng::below(rng, 4) as usize
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output coordinate influences the loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut r = rng::pcg(seed);
    let w = normal(g.shape(y), &mut r);
    let w = g.constant(w);
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

/// Names of the primitives covered by [`primitive_trial`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "mul",
    "scale",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "embedding",
    "layer_norm",
    "dropout",
    "concat_rows",
    "concat_cols",
    "slice",
    "softmax",
    "softmax_causal",
    "cross_entropy",
    "sum",
    "sharpness_entropy",
    "sharpness_neg_l2",
    "sharpness_neg_linf",
];

/// One randomized check of primitive `name`; returns the worst relative
/// error and the number of coordinates compared.
pub fn primitive_trial(name: &str, seed: u64) -> Result<(f64, usize), TensorError> {
    let mut r = rng::pcg(seed);
    let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let ps = rng::derive_seed(seed, 99);
    match name {
        "matmul" => check(&[normal(&[m, k], &mut r), normal(&[k, n], &mut r)], &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, ps)
        }),
        "matmul_nt" => check(&[normal(&[m, k], &mut r), normal(&[n, k], &mut r)], &|g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, ps)
        }),
        "add" => check(&[normal(&[m, n], &mut r), normal(&[m, n], &mut r)], &|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, ps)
        }),
        "add_row" => check(&[normal(&[m, n], &mut r), normal(&[n], &mut r)], &|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, ps)
        }),
        "mul" => check(&[normal(&[m, n], &mut r), normal(&[m, n], &mut r)], &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, ps)
        }),
        "scale" => {
            let s: f64 = StandardNormal.sample(&mut r);
            check(&[normal(&[m, n], &mut r)], &|g, v| {
                let y = g.scale(v[0], s);
                project(g, y, ps)
            })
        }
        "relu" => check(&[away_from_zero(&[m, n], 1e-2, &mut r)], &|g, v| {
            let y = g.relu(v[0]);
            project(g, y, ps)
        }),
        "gelu" | "sigmoid" | "tanh" => {
            let name = name.to_string();
            check(&[normal(&[m, n], &mut r)], &move |g, v| {
                let y = match name.as_str() {
                    "gelu" => g.gelu(v[0]),
                    "sigmoid" => g.sigmoid(v[0]),
                    _ => g.tanh(v[0]),
                };
                project(g, y, ps)
            })
        }
        "embedding" => {
            let idx: Vec<usize> = (0..m + 2).map(|_| rng::below(&mut r, k as u32) as usize).collect();
            check(&[normal(&[k, n], &mut r)], &move |g, v| {
                let y = g.embedding(v[0], &idx)?;
                project(g, y, ps)
            })
        }
        "layer_norm" => {
            let c = n + 1;
            check(
                &[normal(&[m, c], &mut r), normal(&[c], &mut r), normal(&[c], &mut r)],
                &|g, v| {
                    let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(g, y, ps)
                },
            )
        }
        "dropout" => {
            let p = 0.1 + 0.8 * rng::unit_f64(&mut r);
            let ds = r.next_u64();
            check(&[normal(&[m, n], &mut r)], &move |g, v| {
                let mut dr = rng::pcg(ds);
                let y = g.dropout(v[0], p, true, &mut dr)?;
                project(g, y, ps)
            })
        }
        "concat_rows" => check(&[normal(&[m, n], &mut r), normal(&[k, n], &mut r)], &|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y, ps)
        }),
        "concat_cols" => check(&[normal(&[m, n], &mut r), normal(&[m, k], &mut r)], &|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, ps)
        }),
        "slice" => {
            let (rows, cols) = (m + 2, n + 2);
            let r0 = rng::below(&mut r, 2) as usize;
            let c0 = rng::below(&mut r, 2) as usize;
            check(&[normal(&[rows, cols], &mut r)], &move |g, v| {
                let y = g.slice(v[0], r0..rows - 1, c0..cols)?;
                project(g, y, ps)
            })
        }
        "softmax" | "softmax_causal" => {
            let causal = name == "softmax_causal";
            let temp = 0.3 + 2.0 * rng::unit_f64(&mut r);
            check(&[normal(&[m + 1, m + 1], &mut r)], &move |g, v| {
                let y = g.softmax_rows(v[0], temp, causal)?;
                project(g, y, ps)
            })
        }
        "cross_entropy" => {
            let rows = m + 1;
            let targets: Vec<usize> = (0..rows).map(|_| rng::below(&mut r, (n + 1) as u32) as usize).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| r.next_u32() % 2 == 0).collect();
            mask[rng::below(&mut r, rows as u32) as usize] = true;
            check(&[normal(&[rows, n + 1], &mut r)], &move |g, v| {
                g.cross_entropy_masked(v[0], &targets, &mask)
            })
        }
        "sum" => check(&[normal(&[m, n], &mut r)], &|g, v| Ok(g.sum(v[0]))),
        "sharpness_entropy" | "sharpness_neg_l2" | "sharpness_neg_linf" => {
            let kind = SharpenKind::parse(&name["sharpness_".len()..]).expect("kind");
            let causal = r.next_u32() % 2 == 0;
            let size = m + 2;
            check(&[normal(&[size, size], &mut r).map(|v| 2.0 * v)], &move |g, v| {
                let p = g.softmax_rows(v[0], 1.0, causal)?;
                Ok(g.sharpness(p, kind, causal).0)
            })
        }
        other => Err(TensorError::Argument {
            op: "gradcheck",
            message: format!("unknown primitive {other}"),
        }),
    }
}

/// Runs `trials_per_primitive` seeded trials of every primitive.
pub fn primitive_suite(master: u64, trials_per_primitive: usize) -> Result<Vec<GradCheck>, TensorError> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let mut worst = 0.0f64;
            let mut coords = 0;
            for t in 0..trials_per_primitive {
                let seed = rng::derive_seed(master, (p * 100_000 + t) as u64);
                let (e, c) = primitive_trial(name, seed)?;
                worst = worst.max(e);
                coords += c;
            }
            Ok(GradCheck {
                name: name.to_string(),
                trials: trials_per_primitive,
                coordinates: coords,
                max_rel_error: worst,
            })
        })
        .collect()
}

fn random_batch(rng: &mut Pcg32, batch: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| (0..len).map(|_| rng::below(rng, vocab as u32) as usize).collect())
        .collect()
}

/// Clean-style masked loss of a whole model on a random batch, checked
/// against finite differences over every parameter. `sharpen` adds an
/// entropy sharpening term with the given weight.
pub fn model_trial(config: ModelConfig, seed: u64, sharpen: Option<f64>) -> Result<(f64, usize), TensorError> {
    let model = SequenceModel::<f64>::init(config, seed).map_err(|e| TensorError::Argument {
        op: "gradcheck",
        message: e.to_string(),
    })?;
    let mut r = rng::pcg(rng::derive_seed(seed, 1));
    let len = 3 + rng::below(&mut r, 4) as usize;
    let batch = random_batch(&mut r, 2, len, model.config.vocab());
    let targets: Vec<usize> = (0..2 * len).map(|_| rng::below(&mut r, model.config.vocab() as u32) as usize).collect();
    let mut mask: Vec<bool> = (0..2 * len).map(|_| r.next_u32() % 2 == 0).collect();
    mask[0] = true;
    // Larger weights than the training init so that every path carries signal.
    let inputs: Vec<Tensor<f64>> = model.params.tensors.iter().map(|t| t.map(|v| v * 10.0)).collect();
    let m = &model;
    check(&inputs, &|g, vars| {
        let mut unused = rng::pcg(0);
        let out = m
            .forward(g, vars, &batch, false, &mut unused)
            .map_err(|e| TensorError::Argument {
                op: "forward",
                message: e.to_string(),
            })?;
        let mut loss = g.cross_entropy_masked(out.logits, &targets, &mask)?;
        if let Some(lambda) = sharpen {
            if let Some(s) = sharpening_term(g, &out, SharpenKind::Entropy).map_err(|e| TensorError::Argument {
                op: "sharpen",
                message: e.to_string(),
            })? {
                let s = g.scale(s, lambda);
                loss = g.add(loss, s)?;
            }
        }
        Ok(loss)
    })
}

pub fn tiny_transformer() -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        layers: 1,
        d_model: 4,
        heads: 1,
        max_len: 8,
        ..TransformerConfig::default()
    })
}

pub fn tiny_lstm() -> ModelConfig {
    ModelConfig::Lstm(LstmConfig {
        hidden: 3,
        layers: 1,
        vocab: 5,
    })
}
