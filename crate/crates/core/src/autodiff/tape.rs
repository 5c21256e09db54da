use std::collections::HashSet;

use super::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus};
use super::params::{Gradients, ParamId, ParamStore};
use crate::crf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// The closed set of differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Mul,
    AddRow,
    Scale,
    ConcatCols,
    GatherRows,
    ColSlice,
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
    LayerNorm,
    CosineRows,
    ScaleRows,
    MeanRows,
    Sum,
    CrfLogLikelihood,
    BceWithLogits,
    Map,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::ConcatCols,
        OpKind::GatherRows,
        OpKind::ColSlice,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::CosineRows,
        OpKind::ScaleRows,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::CrfLogLikelihood,
        OpKind::BceWithLogits,
        OpKind::Map,
    ];
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    GatherRows { inputs: Vec<Var>, index: Vec<(u32, u32)> },
    ColSlice(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CosineRows { x: Var, proto: Var, cos: Vec<f64> },
    ScaleRows(Var, Var),
    MeanRows(Var),
    Sum(Var),
    Crf { emissions: Var, transitions: Var, gold: Vec<usize> },
    Bce { logits: Var, targets: Vec<f64> },
    Map { x: Var, df: fn(f64) -> f64 },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass so they can be differentiated.
///
/// A tape borrows the parameter store read-only; gradients come back from
/// [`Tape::backward`] as a [`Gradients`] value, so several tapes may run over
/// the same store concurrently. A tape itself is never shared.
pub struct Tape<'p> {
    store: &'p ParamStore,
    frozen: Option<&'p HashSet<ParamId>>,
    nodes: Vec<Node>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, frozen: None, nodes: Vec::new() }
    }

    /// Parameters in `frozen` enter the graph as constants.
    pub fn with_frozen(store: &'p ParamStore, frozen: &'p HashSet<ParamId>) -> Self {
        Tape { store, frozen: Some(frozen), nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = value.check_finite("constant")?;
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let frozen = self.frozen.is_some_and(|f| f.contains(&id));
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: !frozen });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::dim("matmul", format!("({m},{k}) x ({k2},{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_rows(m, n, out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("({m},{k}) x ({n},{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_rows(m, n, out)?, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = shape2(t);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor::from_rows(n, m, out)?, Op::Transpose(a), &[a], "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds the single row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        let (br, bc) = shape2(self.value(bias));
        if br != 1 || bc != n {
            return Err(Error::dim("add_row", format!("({m},{n}) + ({br},{bc})")));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::from_rows(m, n, out)?, Op::AddRow(a, bias), &[a, bias], "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Scale(a, factor), &[a], "scale")
    }

    /// Concatenation along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p));
            if r != m {
                return Err(Error::dim("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_rows(m, n, out)?, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Builds a new matrix whose row `r` is row `index[r].1` of `inputs[index[r].0]`.
    pub fn gather_rows(&mut self, inputs: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::dim("gather_rows", "no inputs"));
        }
        let n = self.value(inputs[0]).cols();
        for &v in inputs {
            if self.value(v).cols() != n {
                return Err(Error::dim("gather_rows", format!("column counts {n} vs {}", self.value(v).cols())));
            }
        }
        let mut out = Vec::with_capacity(index.len() * n);
        let mut packed = Vec::with_capacity(index.len());
        for &(slot, row) in index {
            let t = inputs
                .get(slot)
                .map(|&v| self.value(v))
                .ok_or_else(|| Error::dim("gather_rows", format!("input slot {slot} out of range")))?;
            if row >= t.rows() {
                return Err(Error::dim("gather_rows", format!("row {row} of {} rows", t.rows())));
            }
            out.extend_from_slice(t.row_slice(row));
            packed.push((slot as u32, row as u32));
        }
        let t = Tensor::from_rows(index.len(), n, out)?;
        self.push(t, Op::GatherRows { inputs: inputs.to_vec(), index: packed }, inputs, "gather_rows")
    }

    /// Rows `start..end` of `a`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<_> = (start..end).map(|r| (0, r)).collect();
        if start > end {
            return Err(Error::dim("row_slice", format!("{start}..{end}")));
        }
        self.gather_rows(&[a], &index)
    }

    /// Stacks inputs vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (slot, &p) in parts.iter().enumerate() {
            index.extend((0..self.value(p).rows()).map(|r| (slot, r)));
        }
        self.gather_rows(parts, &index)
    }

    /// Columns `start..end` of `a`.
    pub fn col_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if start > end || end > n {
            return Err(Error::dim("col_slice", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.push(Tensor::from_rows(m, w, out)?, Op::ColSlice(a, start), &[a], "col_slice")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, op, &[a], name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    /// Elementwise `f` with a caller-supplied derivative `df(x)`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary(a, f, Op::Map { x: a, df }, "map")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Tensor::from_rows(m, n, out)?, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Row-wise layer normalization with a learned gain and shift, both `(1, n)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        for p in [gamma, beta] {
            let s = shape2(self.value(p));
            if s != (1, n) {
                return Err(Error::dim("layer_norm", format!("parameter {s:?} for width {n}")));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        self.push(Tensor::from_rows(m, n, out)?, op, &[x, gamma, beta], "layer_norm")
    }

    /// Cosine similarity of every row of `x` with the single row `proto`,
    /// as an `(m, 1)` column. Zero-norm operands give similarity 0.
    pub fn cosine_rows(&mut self, x: Var, proto: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        let s = shape2(self.value(proto));
        if s != (1, n) {
            return Err(Error::dim("cosine_rows", format!("({m},{n}) vs {s:?}")));
        }
        let p = self.value(proto).data();
        let pn = dot(p, p).sqrt();
        let src = self.value(x).data();
        let cos: Vec<f64> = (0..m)
            .map(|i| {
                let row = &src[i * n..(i + 1) * n];
                let xn = dot(row, row).sqrt();
                if xn == 0.0 || pn == 0.0 {
                    0.0
                } else {
                    dot(row, p) / (xn * pn)
                }
            })
            .collect();
        let t = Tensor::from_rows(m, 1, cos.clone())?;
        self.push(t, Op::CosineRows { x, proto, cos }, &[x, proto], "cosine_rows")
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` is `(m, 1)`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(x));
        let ss = shape2(self.value(s));
        if ss != (m, 1) {
            return Err(Error::dim("scale_rows", format!("({m},{n}) by {ss:?}")));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(n.max(1)).enumerate() {
            for v in row.iter_mut() {
                *v *= sv[i];
            }
        }
        self.push(Tensor::from_rows(m, n, out)?, Op::ScaleRows(x, s), &[x, s], "scale_rows")
    }

    /// Column means, `(m, n) -> (1, n)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = shape2(self.value(a));
        if m == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push(Tensor::from_rows(1, n, out)?, Op::MeanRows(a), &[a], "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// `log p(gold | emissions)` under a linear-chain CRF; see [`crate::crf`].
    pub fn crf_log_likelihood(&mut self, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
        let e = self.value(emissions);
        let t = self.value(transitions);
        let ll = crf::log_likelihood(e, t, gold)?;
        let op = Op::Crf { emissions, transitions, gold: gold.to_vec() };
        self.push(Tensor::scalar(ll), op, &[emissions, transitions], "crf_log_likelihood")
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.is_empty() {
            return Err(Error::dim("bce_with_logits", format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let loss = z.iter().zip(targets).map(|(&z, &y)| softplus(z) - y * z).sum::<f64>() / z.len() as f64;
        let op = Op::Bce { logits, targets: targets.to_vec() };
        self.push(Tensor::scalar(loss), op, &[logits], "bce_with_logits")
    }

    /// Reverse pass from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut out = Gradients::with_len(self.store.len());
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, Var(i), &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        this: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = self.store.value(*id);
                out.accumulate_slice(*id, t.shape(), g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = shape2(self.value(*a));
                let n = self.value(*b).cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ, a (m,k), b (n,k)
                let (m, k) = shape2(self.value(*a));
                let n = self.value(*b).rows();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = shape2(self.value(*a));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gi), bv) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *o += gi * bv;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, gi), av) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += gi * av;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                let n = self.value(*bias).cols();
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi * f;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.value(this).rows();
                let n = self.value(this).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { inputs, index } => {
                let n = self.value(this).cols();
                for (r, &(s, row)) in index.iter().enumerate() {
                    let v = inputs[s as usize];
                    if let Some(gv) = self.grad_slot(grads, v) {
                        let row = row as usize;
                        add_into(&mut gv[row * n..(row + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ColSlice(a, start) => {
                let (m, n) = shape2(self.value(*a));
                let w = self.value(this).cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for i in 0..m {
                        add_into(&mut ga[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.value(this).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gi), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = self.value(this).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gi), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, gi), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Map { x, df } => {
                let xs = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, gi), xv) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gi * df(*xv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(this).data();
                let n = self.value(this).cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = shape2(self.value(*x));
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gam[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[i * n + j];
                        }
                        for j in 0..n {
                            gx[i * n + j] += inv_std[i] / nf * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::CosineRows { x, proto, cos } => {
                let (m, n) = shape2(self.value(*x));
                let xs = self.value(*x).data();
                let p = self.value(*proto).data();
                let pn = dot(p, p).sqrt();
                let norms: Vec<f64> = (0..m).map(|i| dot(&xs[i * n..(i + 1) * n], &xs[i * n..(i + 1) * n]).sqrt()).collect();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..m {
                        let xn = norms[i];
                        if xn == 0.0 || pn == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gx[i * n + j] += g[i] * (p[j] / (xn * pn) - cos[i] * xs[i * n + j] / (xn * xn));
                        }
                    }
                }
                if let Some(gp) = self.grad_slot(grads, *proto) {
                    for i in 0..m {
                        let xn = norms[i];
                        if xn == 0.0 || pn == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gp[j] += g[i] * (xs[i * n + j] / (xn * pn) - cos[i] * p[j] / (pn * pn));
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = shape2(self.value(*x));
                let sv = self.value(*s).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * sv[i];
                        }
                    }
                }
                let xs = self.value(*x).data();
                if let Some(gs) = self.grad_slot(grads, *s) {
                    for i in 0..m {
                        gs[i] += dot(&g[i * n..(i + 1) * n], &xs[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = shape2(self.value(*a));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let inv = 1.0 / m as f64;
                    for row in ga.chunks_mut(n) {
                        for (o, gi) in row.iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Crf { emissions, transitions, gold } => {
                let e = self.value(*emissions);
                let t = self.value(*transitions);
                let (de, dt) = crf::log_likelihood_grad(e, t, gold)?;
                if let Some(ge) = self.grad_slot(grads, *emissions) {
                    for (o, d) in ge.iter_mut().zip(de.data()) {
                        *o += g[0] * d;
                    }
                }
                if let Some(gt) = self.grad_slot(grads, *transitions) {
                    for (o, d) in gt.iter_mut().zip(dt.data()) {
                        *o += g[0] * d;
                    }
                }
            }
            Op::Bce { logits, targets } => {
                let z = self.value(*logits).data();
                let c = z.len() as f64;
                if let Some(gz) = self.grad_slot(grads, *logits) {
                    for ((o, zv), y) in gz.iter_mut().zip(z).zip(targets) {
                        *o += g[0] * (kernels::sigmoid(*zv) - y) / c;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
