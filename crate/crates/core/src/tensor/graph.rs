use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm_into, gemm_new, shape_err, Real, Tensor, TensorError};
use crate::rng;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-wise attention sparsity measure. Lower is sharper for every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharpenKind {
    /// Shannon entropy `-Σ p ln p`.
    Entropy,
    /// `-‖p‖₂`.
    NegL2,
    /// `-‖p‖∞`.
    NegLinf,
}

impl SharpenKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "entropy" => Some(Self::Entropy),
            "neg_l2" => Some(Self::NegL2),
            "neg_linf" => Some(Self::NegLinf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::NegL2 => "neg_l2",
            Self::NegLinf => "neg_linf",
        }
    }

    /// Measure of one probability row (entries outside the support excluded).
    pub fn row_value(self, row: &[f64]) -> f64 {
        match self {
            Self::Entropy => -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>(),
            Self::NegL2 => -row.iter().map(|p| p * p).sum::<f64>().sqrt(),
            Self::NegLinf => -row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Number of entries of row `i` a softmax may place mass on.
pub(crate) fn row_support(i: usize, cols: usize, causal: bool) -> usize {
    if causal {
        (i + 1).min(cols)
    } else {
        cols
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Gelu { x: Var, dy: Vec<F> },
    Sigmoid(Var),
    Tanh(Var),
    Embedding { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Dropout { x: Var, mask: Vec<F> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    Softmax { x: Var, inv_temp: F },
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<F> },
    Sum(Var),
    Sharpness { p: Var, kind: SharpenKind, causal: bool },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of primitive operations in creation (hence topological) order.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when none flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let a = F::of((2.0 / std::f64::consts::PI).sqrt());
    let b = F::of(0.044_715);
    let half = F::of(0.5);
    let one = F::one();
    let u = a * (x + b * x * x * x);
    // cheaper than libm tanh; the cancellation near 0 costs only absolute error
    let t = one - F::of(2.0) / ((u + u).exp() + one);
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * a * (one + F::of(3.0) * b * x * x);
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 2 {
            return Err(shape_err(op, &[t.shape()]));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a @ b`, both rank 2.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ`, both rank 2.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let out = gemm_new(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n, false, trans_b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = tx.cols();
        if tb.numel() != c {
            return Err(shape_err("add_row", &[tx.shape(), tb.shape()]));
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(v, &b)| *v = *v + b);
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let v = self.nodes[x.0].value.map(|e| e * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|e| e.max(F::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (y, dy): (Vec<F>, Vec<F>) = tx.data().iter().map(|&e| gelu_parts(e)).unzip();
        let v = Tensor::new(tx.shape().to_vec(), y).expect("same shape");
        self.push(v, Op::Gelu { x, dy }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|e| F::one() / (F::one() + (-e).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|e| e.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (vocab, dim) = self.matrix_dims("embedding", table)?;
        let t = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: ix,
                    bound: vocab,
                });
            }
            data.extend_from_slice(t.row(ix));
        }
        let v = Tensor::new(vec![indices.len(), dim], data)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        ))
    }

    /// Normalizes each row, then applies `gain` and `bias` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = (tx.rows(), tx.cols());
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if g.numel() != c || b.numel() != c {
            return Err(shape_err("layer_norm", &[tx.shape(), g.shape(), b.shape()]));
        }
        let eps = F::of(eps);
        let inv_c = F::one() / F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) * inv_c;
            let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`. Identity
    /// when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Argument {
                op: "dropout",
                message: format!("rate {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng::unit_f64(rng) < p { F::zero() } else { keep })
            .collect();
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }, &[x]))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Argument {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let c = self.nodes[first.0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != c {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.shape(*v)).collect();
                return Err(shape_err("concat", &shapes));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Argument {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let r = self.nodes[first.0].value.rows();
        if parts.iter().any(|p| self.nodes[p.0].value.rows() != r) {
            let shapes: Vec<&[usize]> = parts.iter().map(|v| self.shape(*v)).collect();
            return Err(shape_err("concat", &shapes));
        }
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sub-matrix `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if rows.start > rows.end || cols.start > cols.end || rows.end > t.rows() || cols.end > t.cols() {
            return Err(shape_err(
                "slice",
                &[t.shape(), &[rows.start, rows.end], &[cols.start, cols.end]],
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&t.row(i)[cols.clone()]);
        }
        let v = Tensor::new(vec![rows.len(), cols.len()], data)?;
        Ok(self.push(v, Op::Slice { x, rows, cols }, &[x]))
    }

    /// Row-wise softmax of `scores / temperature`, stabilized by the row max.
    /// With `causal`, entry `(i, j)` for `j > i` is exactly zero.
    pub fn softmax_rows(&mut self, scores: Var, temperature: f64, causal: bool) -> Result<Var, TensorError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::Temperature(temperature));
        }
        let t = &self.nodes[scores.0].value;
        let value = softmax_values(t, F::of(1.0 / temperature), causal);
        Ok(self.push(
            value,
            Op::Softmax {
                x: scores,
                inv_temp: F::of(1.0 / temperature),
            },
            &[scores],
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let t = &self.nodes[logits.0].value;
        let (n, v) = (t.rows(), t.cols());
        if targets.len() != n || mask.len() != n {
            return Err(shape_err("cross_entropy", &[t.shape(), &[targets.len()], &[mask.len()]]));
        }
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0f64;
        for i in (0..n).filter(|&i| mask[i]) {
            let target = targets[i];
            if target >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: target,
                    bound: v,
                });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum = row.iter().fold(F::zero(), |s, &x| s + (x - max).exp());
            let lse = max + sum.ln();
            total += (lse - row[target]).f64();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            rows.push((i, target));
        }
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        let loss = Tensor::scalar(F::of(total / rows.len() as f64));
        Ok(self.push(loss, Op::CrossEntropy { logits, rows, probs }, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over rows with support >= 2 of the row sharpness measure of a
    /// softmax output `p`. Returns the scalar and the number of rows summed.
    pub fn sharpness(&mut self, p: Var, kind: SharpenKind, causal: bool) -> (Var, usize) {
        let t = &self.nodes[p.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut total = 0.0;
        let mut count = 0;
        let mut buf = Vec::with_capacity(c);
        for i in 0..r {
            let s = row_support(i, c, causal);
            if s < 2 {
                continue;
            }
            buf.clear();
            buf.extend(t.row(i)[..s].iter().map(|v| v.f64()));
            total += kind.row_value(&buf);
            count += 1;
        }
        let v = self.push(Tensor::scalar(F::of(total)), Op::Sharpness { p, kind, causal }, &[p]);
        (v, count)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Does not mutate the tape, so repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
    }

    /// `grads[v] += g`, copying instead of zero-filling on first touch.
    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, g: &[F]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y),
            empty => *empty = Some(g.to_vec()),
        }
    }

    /// `grads[v] += op(A) op(B)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_accumulate(
        &self,
        grads: &mut [Option<Vec<F>>],
        v: Var,
        a: &[F],
        b: &[F],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(d) => gemm_into(a, b, d, m, k, n, ta, tb, F::one()),
            empty => *empty = Some(gemm_new(a, b, m, k, n, ta, tb)),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = node.value.cols();
                // dA = dC Bᵀ (or dC B when C = A Bᵀ)
                self.gemm_accumulate(grads, *a, g, tb.data(), m, n, k, false, !*trans_b);
                if *trans_b {
                    // dB = dCᵀ A, B is n x k
                    self.gemm_accumulate(grads, *b, g, ta.data(), n, m, k, true, false);
                } else {
                    // dB = Aᵀ dC, B is k x n
                    self.gemm_accumulate(grads, *b, ta.data(), g, k, m, n, true, false);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g);
                let c = node.value.cols();
                if let Some(d) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(c) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * tb[i];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * ta[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *s);
                }
            }
            Op::Relu(x) => {
                let tx = val(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        if tx[i] > F::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                }
            }
            Op::Gelu { x, dy } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((d, &g), &dy) in d.iter_mut().zip(g).zip(dy) {
                        *d = *d + g * dy;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * y[i] * (F::one() - y[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * (F::one() - y[i] * y[i]);
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let dim = node.value.cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (r, &ix) in indices.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        let dst = &mut d[ix * dim..(ix + 1) * dim];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let r = node.value.rows();
                let gv = val(*gain).data();
                if let Some(d) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &g), &h) in d.iter_mut().zip(gr).zip(hr) {
                            *d = *d + g * h;
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *bias) {
                    for gr in g.chunks_exact(c) {
                        d.iter_mut().zip(gr).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let inv_c = F::one() / F::of(c as f64);
                    for i in 0..r {
                        let (gr, hr) = (&g[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dhh = mean_dhh + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_c;
                        mean_dhh = mean_dhh * inv_c;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            d[i * c + j] = d[i * c + j] + rstd[i] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * mask[i];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    self.accumulate(grads, *p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for p in parts {
                    let (r, c) = (val(*p).rows(), val(*p).cols());
                    if let Some(d) = self.slot(grads, *p) {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = d[i * c + j] + g[i * total + col + j];
                            }
                        }
                    }
                    col += c;
                }
            }
            Op::Slice { x, rows, cols } => {
                let xc = val(*x).cols();
                let w = cols.len();
                if let Some(d) = self.slot(grads, *x) {
                    for (ri, i) in rows.clone().enumerate() {
                        for (cj, j) in cols.clone().enumerate() {
                            d[i * xc + j] = d[i * xc + j] + g[ri * w + cj];
                        }
                    }
                }
            }
            Op::Softmax { x, inv_temp } => {
                let y = &node.value;
                let c = y.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot = yr.iter().zip(gr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..c {
                            d[i * c + j] = d[i * c + j] + *inv_temp * yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let v = val(*logits).cols();
                let scale = g[0] / F::of(rows.len() as f64);
                if let Some(d) = self.slot(grads, *logits) {
                    for (k, &(i, target)) in rows.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == target { F::one() } else { F::zero() };
                            d[i * v + j] = d[i * v + j] + scale * (probs[k * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
            Op::Sharpness { p, kind, causal } => {
                let t = val(*p);
                let c = t.cols();
                if let Some(d) = self.slot(grads, *p) {
                    for i in 0..t.rows() {
                        let s = row_support(i, c, *causal);
                        if s < 2 {
                            continue;
                        }
                        let row = &t.row(i)[..s];
                        let out = &mut d[i * c..i * c + s];
                        match kind {
                            SharpenKind::Entropy => {
                                for (o, &pv) in out.iter_mut().zip(row) {
                                    if pv > F::zero() {
                                        *o = *o - g[0] * (pv.ln() + F::one());
                                    }
                                }
                            }
                            SharpenKind::NegL2 => {
                                let norm = row.iter().fold(F::zero(), |a, &b| a + b * b).sqrt();
                                if norm > F::zero() {
                                    for (o, &pv) in out.iter_mut().zip(row) {
                                        *o = *o - g[0] * pv / norm;
                                    }
                                }
                            }
                            SharpenKind::NegLinf => {
                                let mut best = 0;
                                for (j, &pv) in row.iter().enumerate() {
                                    if pv > row[best] {
                                        best = j;
                                    }
                                }
                                out[best] = out[best] - g[0];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_values<F: Real>(t: &Tensor<F>, inv_temp: F, causal: bool) -> Tensor<F> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        let s = row_support(i, c, causal);
        let row = &t.row(i)[..s];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let dst = &mut out[i * c..i * c + s];
        let mut sum = F::zero();
        for (o, &x) in dst.iter_mut().zip(row) {
            *o = ((x - max) * inv_temp).exp();
            sum = sum + *o;
        }
        let inv = F::one() / sum;
        dst.iter_mut().for_each(|o| *o = *o * inv);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_matmul_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        let err = g.matmul(a, a).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let p = g.softmax_rows(s, 1.0, false).unwrap();
        let pv = g.value(p).data();
        assert!((pv[0] - 0.25).abs() < 1e-15 && (pv[1] - 0.75).abs() < 1e-15);

        let eq = g.constant(Tensor::full(&[4, 4], 0.3));
        let p = g.softmax_rows(eq, 1.0, false).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = g.softmax_rows(eq, 1.0, true).unwrap();
        let pv = g.value(p);
        assert_eq!(pv.row(0), &[1.0, 0.0, 0.0, 0.0]);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(pv.at(i, j), 0.0);
            }
            assert!((pv.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(g.softmax_rows(eq, 0.0, true), Err(TensorError::Temperature(_))));
        assert!(matches!(g.softmax_rows(eq, -1.0, true), Err(TensorError::Temperature(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[3, 5]));
        let l = g.cross_entropy_masked(logits, &[0, 1, 2], &[false, true, false]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-15);
        let sure = g.constant(t(&[2, 2], &[800.0, 0.0, 0.0, 800.0]));
        let l = g.cross_entropy_masked(sure, &[0, 1], &[true, true]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(
            g.cross_entropy_masked(logits, &[0, 1, 2], &[false; 3]),
            Err(TensorError::EmptyMask)
        );
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 4]);
        // idempotent
        let again = g.backward(s).unwrap();
        assert_eq!(again.get(p).unwrap().data(), grads.get(p).unwrap().data());
        assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2], &[1.0, 2.0]));
        let d = g.detach(p);
        let sq = g.mul(d, p).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(d).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
        let only_detached = g.sum(d);
        let grads = g.backward(only_detached).unwrap();
        assert_eq!(grads.get_or_zeros(p, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_identity_when_eval() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[4, 4], 1.0));
        let mut r = rng::pcg(1);
        assert_eq!(g.dropout(x, 0.5, false, &mut r).unwrap(), x);
        let y = g.dropout(x, 0.5, true, &mut r).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, true, &mut r).is_err());
    }

    #[test]
    fn sharpness_values() {
        let mut g = Graph::<f64>::new();
        let uni = g.constant(Tensor::full(&[1, 4], 0.25));
        let (h, n) = g.sharpness(uni, SharpenKind::Entropy, false);
        assert_eq!(n, 1);
        assert!((g.value(h).item() - 4f64.ln()).abs() < 1e-15);
        let (l2, _) = g.sharpness(uni, SharpenKind::NegL2, false);
        assert!((g.value(l2).item() + 0.5).abs() < 1e-15);
        let (li, _) = g.sharpness(uni, SharpenKind::NegLinf, false);
        assert!((g.value(li).item() + 0.25).abs() < 1e-15);
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let (h, n) = g.sharpness(eye, SharpenKind::Entropy, true);
        assert_eq!(n, 1);
        assert_eq!(g.value(h).item(), 0.0);
    }
}
