//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward computation (typically one example).
//! Parameters are read in place from a borrowed [`ParamStore`]; calling
//! [`Tape::backward`] adds parameter gradients into a caller-owned
//! [`ParamGrads`] so a batch can share a single accumulator.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Operand, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Row(Var, usize),
    MixRows {
        emb: Var,
        replacement: Var,
        weight: Var,
    },
    SumRows(Var),
    Sum(Var),
    DivScalar(Var, Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    GradReverse(Var),
    StraightThrough(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Per-node gradients returned by [`Tape::backward`].
pub struct NodeGrads {
    grads: Vec<Option<Tensor>>,
}

impl NodeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; its gradient is available from [`NodeGrads`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, id: ParamId, ids: &[usize]) -> Var {
        let table = self.params.get(id);
        let mut out = Tensor::zeros(ids.len(), table.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        self.push(out, Op::Gather(id, ids.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(Operand::plain(self.value(a)), Operand::plain(self.value(b)));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(Operand::plain(self.value(a)), Operand::trans(self.value(b)));
        self.push(out, Op::MatMulBt(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1 x C) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, out.cols()), r.shape(), "add_row shape mismatch");
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `a * col` with `col` (R x 1) broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = self.value(col);
        assert_eq!((out.rows(), 1), c.shape(), "mul_col shape mismatch");
        for i in 0..out.rows() {
            let s = c.data()[i];
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Affine(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalisation with gain and bias rows (1 x C).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. Columns where `valid` is false get probability 0.
    pub fn softmax_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Var {
        let ta = self.value(a);
        let (rows, cols) = ta.shape();
        if let Some(v) = valid {
            assert_eq!(v.len(), cols, "validity mask length");
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = ta.row(r);
            let ok = |c: usize| valid.is_none_or(|v| v[c]);
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                if ok(c) {
                    let e = (row[c] - max).exp();
                    out.set(r, c, e);
                    sum += e;
                }
            }
            if sum > 0.0 {
                for x in out.row_mut(r) {
                    *x /= sum;
                }
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        assert!(start + len <= ta.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + tp.cols()].copy_from_slice(tp.row(r));
            }
            offset += tp.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let out = Tensor::row_vector(self.value(a).row(index).to_vec());
        self.push(out, Op::Row(a, index))
    }

    /// Row-wise blend `(1 - w_i) * emb_i + w_i * replacement` where
    /// `weight` is R x 1 and `replacement` is a single 1 x C row.
    ///
    /// For `w_i` in {0, 1} the result equals `emb_i` or `replacement`
    /// bit-for-bit.
    pub fn mix_rows(&mut self, emb: Var, replacement: Var, weight: Var) -> Var {
        let te = self.value(emb);
        let rep = self.value(replacement).data();
        let w = self.value(weight).data();
        assert_eq!(w.len(), te.rows(), "mix_rows weight length");
        let mut out = Tensor::zeros(te.rows(), te.cols());
        for r in 0..te.rows() {
            let keep = 1.0 - w[r];
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = keep * te.get(r, c) + w[r] * rep[c];
            }
        }
        self.push(
            out,
            Op::MixRows {
                emb,
                replacement,
                weight,
            },
        )
    }

    /// Column sums, as a 1 x C row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `a / s` for a 1 x 1 `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.value(s).item();
        let out = self.value(a).map(|x| x / d);
        self.push(out, Op::DivScalar(a, s))
    }

    /// `-log softmax(logits)[label]` for a 1 x C row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.rows(), 1, "cross_entropy expects a single row");
        assert!(label < tl.cols(), "label out of range");
        let row = tl.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        let probs = row.iter().map(|x| (x - lse).exp()).collect();
        let loss = lse - row[label];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        )
    }

    /// Identity forward; negated gradient backward.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::GradReverse(a))
    }

    /// Forward value `hard`; the backward pass routes gradient to `soft`
    /// unchanged. Shapes must agree.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.value(soft).shape(), "straight-through shape");
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Parameter gradients are added into `param_grads`; per-node gradients
    /// are returned.
    pub fn backward(&self, loss: Var, param_grads: &mut ParamGrads) -> NodeGrads {
        self.backward_seeded(loss, Tensor::scalar(1.0), param_grads)
    }

    pub fn backward_seeded(
        &self,
        root: Var,
        seed: Tensor,
        param_grads: &mut ParamGrads,
    ) -> NodeGrads {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param(id) => param_grads.accumulate(*id, &g),
                Op::Gather(id, ids) => {
                    let buf = param_grads.buffer(*id, self.params.get(*id).shape());
                    for (r, &row) in ids.iter().enumerate() {
                        for (b, x) in buf.row_mut(row).iter_mut().zip(g.row(r)) {
                            *b += x;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = gemm(Operand::plain(&g), Operand::trans(self.value(*b)));
                    let gb = gemm(Operand::trans(self.value(*a)), Operand::plain(&g));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // c = a b^T: da = g b, db = g^T a
                    let ga = gemm(Operand::plain(&g), Operand::plain(self.value(*b)));
                    let gb = gemm(Operand::trans(&g), Operand::plain(self.value(*a)));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let ta = self.value(*a);
                    let tc = self.value(*col);
                    let mut gc = Tensor::zeros(tc.rows(), 1);
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let s = tc.data()[r];
                        let mut d = 0.0;
                        for (c, x) in ga.row_mut(r).iter_mut().enumerate() {
                            d += *x * ta.get(r, c);
                            *x *= s;
                        }
                        gc.data_mut()[r] = d;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Affine(a, factor) => {
                    let f = *factor;
                    acc(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("tanh value");
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, &xi)| gi * gelu_grad(xi))
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let gn = self.value(*gain).data();
                    let mut ggain = Tensor::zeros(1, cols);
                    let mut gbias = Tensor::zeros(1, cols);
                    let mut gx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            ggain.data_mut()[c] += gr[c] * xh[c];
                            gbias.data_mut()[c] += gr[c];
                            let d = gr[c] * gn[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let is = inv_std[r];
                        for c in 0..cols {
                            let d = gr[c] * gn[c];
                            gx.set(r, c, is * (d - sum_d / n - xh[c] * sum_dx / n));
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Row(a, index) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    ga.row_mut(*index).copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::MixRows {
                    emb,
                    replacement,
                    weight,
                } => {
                    let te = self.value(*emb);
                    let rep = self.value(*replacement).data();
                    let w = self.value(*weight).data();
                    let mut ge = Tensor::zeros(te.rows(), te.cols());
                    let mut grep = Tensor::zeros(1, te.cols());
                    let mut gw = Tensor::zeros(te.rows(), 1);
                    for r in 0..te.rows() {
                        let keep = 1.0 - w[r];
                        let mut dw = 0.0;
                        for c in 0..te.cols() {
                            let gi = g.get(r, c);
                            ge.set(r, c, keep * gi);
                            grep.data_mut()[c] += w[r] * gi;
                            dw += gi * (rep[c] - te.get(r, c));
                        }
                        gw.data_mut()[r] = dw;
                    }
                    acc(&mut grads, *emb, ge);
                    acc(&mut grads, *replacement, grep);
                    acc(&mut grads, *weight, gw);
                }
                Op::SumRows(a) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..ta.rows() {
                        ga.row_mut(r).copy_from_slice(g.data());
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
                }
                Op::DivScalar(a, s) => {
                    let d = self.value(*s).item();
                    let y = node.value.as_ref().expect("div value");
                    let gs: f64 = -g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>() / d;
                    acc(&mut grads, *a, g.map(|x| x / d));
                    acc(&mut grads, *s, Tensor::scalar(gs));
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let s = g.item();
                    let mut gl = Tensor::row_vector(probs.iter().map(|p| p * s).collect());
                    gl.data_mut()[*label] -= s;
                    acc(&mut grads, *logits, gl);
                }
                Op::GradReverse(a) => acc(&mut grads, *a, g.map(|x| -x)),
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g),
            }
        }
        NodeGrads { grads }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central-difference check of every input entry of a scalar function
    /// built on a tape from `inputs`.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let store = ParamStore::new();
        let eval = |xs: &[Tensor]| {
            let mut tape = Tape::new(&store);
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let mut pg = ParamGrads::new(&store);
        let grads = tape.backward(out, &mut pg);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.wrt(vars[k]).map_or(0.0, |g| g.data()[idx]);
                let tol = 1e-6 * (1.0 + numeric.abs());
                assert!(
                    (numeric - analytic).abs() < tol,
                    "input {k} entry {idx}: numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)];
        check(inputs, |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.tanh(m);
            t.sum(m)
        });
    }

    #[test]
    fn matmul_bt_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(3, 4, &mut rng), random(5, 4, &mut rng), random(3, 5, &mut rng)];
        check(inputs, |t, v| {
            let s = t.matmul_bt(v[0], v[1]);
            let p = t.softmax_rows(s, Some(&[true, true, false, true, true]));
            let w = t.mul(p, v[2]);
            t.sum(w)
        });
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(2, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng), random(2, 5, &mut rng)];
        check(inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let y = t.gelu(y);
            let y = t.mul(y, v[3]);
            t.sum(y)
        });
    }

    #[test]
    fn slicing_concat_row_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(3, 6, &mut rng), random(7, 3, &mut rng)];
        check(inputs, |t, v| {
            let a = t.slice_cols(v[0], 1, 3);
            let b = t.slice_cols(v[0], 4, 2);
            let c = t.concat_cols(&[b, a, b]);
            let r = t.row(c, 2);
            let r = t.scale(r, 0.7);
            let logits = t.matmul(r, v[1]);
            t.cross_entropy(logits, 1)
        });
    }

    #[test]
    fn mix_rows_mul_col_and_division_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = random(4, 1, &mut rng);
        for x in w.data_mut() {
            *x = x.abs() + 0.1;
        }
        let inputs = vec![random(4, 3, &mut rng), random(1, 3, &mut rng), w, random(4, 3, &mut rng)];
        check(inputs, |t, v| {
            let m = t.mix_rows(v[0], v[1], v[2]);
            let m = t.mul_col(m, v[2]);
            let s = t.sum_rows(m);
            let k = t.sum(v[2]);
            let q = t.div_scalar(s, k);
            let e = t.sub(v[3], v[0]);
            let e = t.sum_rows(e);
            let z = t.mul(q, e);
            let z = t.add(z, q);
            t.sum(z)
        });
    }

    #[test]
    fn mix_rows_is_exact_for_binary_weights() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let emb = tape.leaf(Tensor::from_vec(2, 2, vec![0.1, 0.7, -0.3, 0.2]));
        let rep = tape.leaf(Tensor::row_vector(vec![0.3, -0.9]));
        let w = tape.leaf(Tensor::column_vector(vec![0.0, 1.0]));
        let out = tape.mix_rows(emb, rep, w);
        assert_eq!(tape.value(out).data(), &[0.1, 0.7, 0.3, -0.9]);
    }

    #[test]
    fn gather_scatters_into_param_grads() {
        let mut store = ParamStore::new();
        let table = store.add("emb", Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let mut tape = Tape::new(&store);
        let rows = tape.gather(table, &[2, 0, 2]);
        let s = tape.sum(rows);
        assert_eq!(tape.value(s).item(), 5.0 + 6.0 + 1.0 + 2.0 + 5.0 + 6.0);
        let mut pg = ParamGrads::new(&store);
        tape.backward(s, &mut pg);
        assert_eq!(pg.get(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
