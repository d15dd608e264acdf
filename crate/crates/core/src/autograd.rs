//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every value in the graph is a 2-D [`Tensor`]; scalars are `1x1`. The
//! graph is eager: each operation computes its value immediately and records
//! enough information to run the backward pass later. Parameters enter the
//! graph through [`Graph::bind`], which maps every entry of a [`ParamStore`]
//! to either a differentiable leaf or a constant.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = beta * c + a * b` where `a` is `m x k`, `b` is `k x n`. Transposes
/// are expressed through the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: strides and extents describe sub-slices of `a`, `b` and `c`
    // whose lengths were checked by the callers' shape assertions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product, exposed for no-grad callers.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        &mut out.data,
        0.0,
    );
    out
}

/// Identifies a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), value.shape());
        self.tensors[id.0] = value;
    }
}

/// Gradients for every tensor of one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_in_place(s);
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Parameters of a store bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// Sparse row mixing: each output row is a weighted sum of input rows.
pub type RowMix = Vec<Vec<(usize, f64)>>;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, b_transposed: bool },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { a: NodeId, index: Vec<usize> },
    ReplaceRows { a: NodeId, rows: Vec<usize>, token: NodeId },
    MixRows { a: NodeId, mix: RowMix },
    Reshape(NodeId),
    Sum(NodeId),
    BceLogits { logits: NodeId, targets: Vec<f64>, weights: Vec<f64> },
    SoftmaxCe { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
    SmoothL1 { pred: NodeId, target: Tensor, row_weights: Vec<f64> },
    SquaredError { pred: NodeId, target: Tensor },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::MixRows { .. } => "mix_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::BceLogits { .. } => "bce_logits",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Huber loss with unit threshold.
#[inline]
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

#[inline]
fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Eager computation graph with a reverse-mode backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    op_counts: HashMap<&'static str, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes created per operation kind.
    pub fn op_counts(&self) -> &HashMap<&'static str, usize> {
        &self.op_counts
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        *self.op_counts.entry(op.kind()).or_default() += 1;
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Binds every tensor of `store`. Trainable bindings receive gradients
    /// in [`Graph::backward`]; frozen ones are plain constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let nodes = store
            .iter()
            .map(|(id, _, t)| {
                let op = if trainable { Op::Param(id) } else { Op::Input };
                self.push(t.clone(), op)
            })
            .collect();
        Bound { nodes }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(
            av.rows,
            av.cols,
            bv.cols,
            &av.data,
            av.cols as isize,
            1,
            &bv.data,
            bv.cols as isize,
            1,
            &mut out.data,
            0.0,
        );
        self.push(out, Op::MatMul { a, b, b_transposed: false })
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt shape mismatch");
        let mut out = Tensor::zeros(av.rows, bv.rows);
        gemm(
            av.rows,
            av.cols,
            bv.rows,
            &av.data,
            av.cols as isize,
            1,
            &bv.data,
            1,
            bv.cols as isize,
            &mut out.data,
            0.0,
        );
        self.push(out, Op::MatMul { a, b, b_transposed: true })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "mul_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// `x * W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let src = av.row(r);
            let cols = av.cols;
            softmax_row(src, &mut out.data[r * cols..(r + 1) * cols]);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!((1, xv.cols), g.shape());
        assert_eq!((1, xv.cols), b.shape());
        let n = xv.cols as f64;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; xv.rows];
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..xv.cols {
                let h = (row[c] - mean) * rs;
                xhat[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(index.len(), av.cols);
        for (o, &i) in index.iter().enumerate() {
            assert!(i < av.rows, "gather_rows index out of range");
            out.row_mut(o).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows { a, index: index.to_vec() })
    }

    /// Replaces the listed rows of `a` by the `1 x C` row `token`.
    pub fn replace_rows(&mut self, a: NodeId, rows: &[usize], token: NodeId) -> NodeId {
        let (av, tv) = (self.value(a), self.value(token));
        assert_eq!((1, av.cols), tv.shape(), "replace_rows token shape");
        let mut out = av.clone();
        for &r in rows {
            assert!(r < av.rows, "replace_rows index out of range");
            out.row_mut(r).copy_from_slice(&tv.data);
        }
        self.push(out, Op::ReplaceRows { a, rows: rows.to_vec(), token })
    }

    /// Each output row `o` is `sum_j w_j * a[i_j]` over `mix[o]`.
    pub fn mix_rows(&mut self, a: NodeId, mix: RowMix) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(mix.len(), av.cols);
        for (o, entries) in mix.iter().enumerate() {
            let dst = &mut out.data[o * av.cols..(o + 1) * av.cols];
            for &(i, w) in entries {
                for (d, s) in dst.iter_mut().zip(av.row(i)) {
                    *d += w * s;
                }
            }
        }
        self.push(out, Op::MixRows { a, mix })
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        self.push(out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `sum_i w_i * bce(sigmoid(z_i), t_i)` over a column of logits.
    pub fn bce_logits(&mut self, logits: NodeId, targets: Vec<f64>, weights: Vec<f64>) -> NodeId {
        let zv = self.value(logits);
        assert_eq!(zv.cols, 1);
        assert_eq!(zv.rows, targets.len());
        assert_eq!(zv.rows, weights.len());
        let mut s = 0.0;
        for ((&z, &t), &w) in zv.data.iter().zip(&targets).zip(&weights) {
            if w != 0.0 {
                s += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
            }
        }
        self.push(Tensor::scalar(s), Op::BceLogits { logits, targets, weights })
    }

    /// `sum_r w_r * cross_entropy(softmax(z_r), y_r)`.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: Vec<usize>, weights: Vec<f64>) -> NodeId {
        let zv = self.value(logits);
        assert_eq!(zv.rows, targets.len());
        assert_eq!(zv.rows, weights.len());
        let mut probs = Tensor::zeros(zv.rows, zv.cols);
        let mut s = 0.0;
        for r in 0..zv.rows {
            let row = zv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            assert!(targets[r] < zv.cols, "softmax_ce class out of range");
            if weights[r] != 0.0 {
                s += weights[r] * (lse - row[targets[r]]);
            }
            for c in 0..zv.cols {
                probs.data[r * zv.cols + c] = (row[c] - lse).exp();
            }
        }
        self.push(Tensor::scalar(s), Op::SoftmaxCe { logits, targets, weights, probs })
    }

    /// `sum_r w_r * sum_c smooth_l1(pred[r,c] - target[r,c])`.
    pub fn smooth_l1(&mut self, pred: NodeId, target: Tensor, row_weights: Vec<f64>) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape());
        assert_eq!(pv.rows, row_weights.len());
        let mut s = 0.0;
        for r in 0..pv.rows {
            if row_weights[r] == 0.0 {
                continue;
            }
            let row: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| smooth_l1(p - t))
                .sum();
            s += row_weights[r] * row;
        }
        self.push(Tensor::scalar(s), Op::SmoothL1 { pred, target, row_weights })
    }

    /// `sum (pred - target)^2`.
    pub fn squared_error(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "squared_error shape mismatch");
        let s = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Tensor::scalar(s), Op::SquaredError { pred, target })
    }

    /// Back-propagates from the scalar `root` and returns gradients for the
    /// trainable store that was bound into this graph (`num_params` entries).
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.grads[pid.0].add_assign(&g),
                Op::MatMul { a, b, b_transposed } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, n) = (g.rows, g.cols);
                    let k = av.cols;
                    // dA = dC * B^T (or dC * B when b was transposed)
                    let ga = acc(&mut grads, *a, av.rows, av.cols);
                    if *b_transposed {
                        gemm(m, n, k, &g.data, n as isize, 1, &bv.data, k as isize, 1, ga, 1.0);
                    } else {
                        gemm(m, n, k, &g.data, n as isize, 1, &bv.data, 1, n as isize, ga, 1.0);
                    }
                    let gb = acc(&mut grads, *b, bv.rows, bv.cols);
                    if *b_transposed {
                        // d(B) = dC^T * A, shape n x k
                        gemm(n, m, k, &g.data, 1, n as isize, &av.data, k as isize, 1, gb, 1.0);
                    } else {
                        // d(B) = A^T * dC, shape k x n
                        gemm(k, m, n, &av.data, 1, k as isize, &g.data, n as isize, 1, gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.rows, g.cols), &g.data);
                    add_into(acc(&mut grads, *b, g.rows, g.cols), &g.data);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, g.rows, g.cols), &g.data);
                    let gr = acc(&mut grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        add_into(gr, g.row(r));
                    }
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    let ga = acc(&mut grads, *a, g.rows, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga[r * g.cols + c] += g.at(r, c) * rv.data[c];
                        }
                    }
                    let gr = acc(&mut grads, *row, 1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gr[c] += g.at(r, c) * av.at(r, c);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.rows, g.cols);
                    for (d, v) in ga.iter_mut().zip(&g.data) {
                        *d += s * v;
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, g.rows, g.cols);
                    for ((d, v), x) in ga.iter_mut().zip(&g.data).zip(&av.data) {
                        *d += v * gelu_grad(*x);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.rows, g.cols);
                    for r in 0..g.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..g.cols {
                            ga[r * g.cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = self.value(*gain).data.clone();
                    let (rows, cols) = (g.rows, g.cols);
                    let n = cols as f64;
                    {
                        let gg = acc(&mut grads, *gain, 1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] += g.at(r, c) * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, 1, cols);
                        for r in 0..rows {
                            add_into(gb, g.row(r));
                        }
                    }
                    let gx = acc(&mut grads, *x, rows, cols);
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = g.at(r, c) * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = g.at(r, c) * gv[c];
                            let h = xhat[r * cols + c];
                            gx[r * cols + c] += rstd[r] * (dh - sum_dh / n - h * sum_dh_h / n);
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let cols = self.value(*a).cols;
                    let ga = acc(&mut grads, *a, g.rows, cols);
                    for r in 0..g.rows {
                        add_into(&mut ga[r * cols + start..r * cols + start + g.cols], g.row(r));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let gp = acc(&mut grads, p, g.rows, pc);
                        for r in 0..g.rows {
                            add_into(
                                &mut gp[r * pc..(r + 1) * pc],
                                &g.row(r)[offset..offset + pc],
                            );
                        }
                        offset += pc;
                    }
                }
                Op::GatherRows { a, index } => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, av.rows, av.cols);
                    for (o, &i) in index.iter().enumerate() {
                        add_into(&mut ga[i * g.cols..(i + 1) * g.cols], g.row(o));
                    }
                }
                Op::ReplaceRows { a, rows, token } => {
                    let mut g_rest = g.clone();
                    let mut g_tok = vec![0.0; g.cols];
                    for &r in rows {
                        // a row listed twice still feeds the token only once
                        let row = g_rest.row_mut(r);
                        add_into(&mut g_tok, row);
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(acc(&mut grads, *a, g.rows, g.cols), &g_rest.data);
                    add_into(acc(&mut grads, *token, 1, g.cols), &g_tok);
                }
                Op::MixRows { a, mix } => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, av.rows, av.cols);
                    for (o, entries) in mix.iter().enumerate() {
                        for &(i, w) in entries {
                            let dst = &mut ga[i * g.cols..(i + 1) * g.cols];
                            for (d, s) in dst.iter_mut().zip(g.row(o)) {
                                *d += w * s;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    add_into(acc(&mut grads, *a, av.rows, av.cols), &g.data);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let s = g.data[0];
                    for d in acc(&mut grads, *a, av.rows, av.cols) {
                        *d += s;
                    }
                }
                Op::BceLogits { logits, targets, weights } => {
                    let zv = self.value(*logits);
                    let s = g.data[0];
                    let gz = acc(&mut grads, *logits, zv.rows, 1);
                    for i in 0..zv.rows {
                        if weights[i] != 0.0 {
                            gz[i] += s * weights[i] * (sigmoid(zv.data[i]) - targets[i]);
                        }
                    }
                }
                Op::SoftmaxCe { logits, targets, weights, probs } => {
                    let s = g.data[0];
                    let gz = acc(&mut grads, *logits, probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        for c in 0..probs.cols {
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            gz[r * probs.cols + c] += s * weights[r] * (probs.at(r, c) - onehot);
                        }
                    }
                }
                Op::SmoothL1 { pred, target, row_weights } => {
                    let pv = self.value(*pred);
                    let s = g.data[0];
                    let gp = acc(&mut grads, *pred, pv.rows, pv.cols);
                    for r in 0..pv.rows {
                        if row_weights[r] == 0.0 {
                            continue;
                        }
                        for c in 0..pv.cols {
                            let d = pv.at(r, c) - target.at(r, c);
                            gp[r * pv.cols + c] += s * row_weights[r] * smooth_l1_grad(d);
                        }
                    }
                }
                Op::SquaredError { pred, target } => {
                    let pv = self.value(*pred);
                    let s = g.data[0];
                    let gp = acc(&mut grads, *pred, pv.rows, pv.cols);
                    for ((d, p), t) in gp.iter_mut().zip(&pv.data).zip(&target.data) {
                        *d += 2.0 * s * (p - t);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut [f64] {
    &mut grads[id.0]
        .get_or_insert_with(|| Tensor::zeros(rows, cols))
        .data
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in values {
            s.insert(*n, t.clone());
        }
        s
    }

    /// Central-difference check of `f` against the graph gradient.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph, &Bound) -> NodeId) {
        let mut g = Graph::new();
        let b = g.bind(store, true);
        let root = f(&mut g, &b);
        let grads = g.backward(root, store);
        let h = 1e-6;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).data[k] += delta;
                    let mut g = Graph::new();
                    let b = g.bind(&s, true);
                    let r = f(&mut g, &b);
                    g.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = grads.get(id).data[k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    err < 1e-6,
                    "{}[{k}]: analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_and_transposed_gradients() {
        let s = store_with(&[("a", t(3, 4, 1)), ("b", t(4, 2, 2)), ("c", t(5, 4, 3))]);
        check(&s, |g, b| {
            let ab = g.matmul(b.get(ParamId(0)), b.get(ParamId(1)));
            let act = g.matmul_bt(b.get(ParamId(0)), b.get(ParamId(2)));
            let x = g.squared_error(ab, Tensor::zeros(3, 2));
            let y = g.squared_error(act, Tensor::zeros(3, 5));
            g.add(x, y)
        });
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let s = store_with(&[
            ("x", t(4, 6, 4)),
            ("g", t(1, 6, 5)),
            ("b", t(1, 6, 6)),
            ("tok", t(1, 6, 7)),
        ]);
        check(&s, |g, b| {
            let x = b.get(ParamId(0));
            let ln = g.layer_norm(x, b.get(ParamId(1)), b.get(ParamId(2)));
            let ge = g.gelu(ln);
            let rep = g.replace_rows(ge, &[1, 3], b.get(ParamId(3)));
            let sm = g.softmax_rows(rep);
            let m = g.mul_row(sm, b.get(ParamId(1)));
            let sl = g.slice_cols(m, 1, 3);
            let cat = g.concat_cols(&[sl, m]);
            let gat = g.gather_rows(cat, &[2, 0, 2]);
            let mix = g.mix_rows(gat, vec![vec![(0, 0.25), (1, 0.75)], vec![(2, 1.0)]]);
            let rs = g.reshape(mix, 3, 6);
            let sc = g.scale(rs, 1.7);
            let target = t(3, 6, 9);
            g.squared_error(sc, target)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let s = store_with(&[("z", t(5, 1, 10)), ("c", t(4, 3, 11)), ("d", t(3, 4, 12))]);
        check(&s, |g, b| {
            let z = g.scale(b.get(ParamId(0)), 3.0);
            let l1 = g.bce_logits(z, vec![1.0, 0.0, 1.0, 0.0, 0.5], vec![1.0, 2.0, 0.0, 1.0, 1.0]);
            let l2 = g.softmax_ce(b.get(ParamId(1)), vec![0, 2, 1, 1], vec![1.0, 1.0, 0.5, 0.0]);
            let d = g.scale(b.get(ParamId(2)), 2.0);
            let l3 = g.smooth_l1(d, t(3, 4, 13), vec![1.0, 0.0, 2.0]);
            let s12 = g.add(l1, l2);
            let s = g.add(s12, l3);
            let summed = g.sum(b.get(ParamId(2)));
            g.add(s, summed)
        });
    }

    #[test]
    fn frozen_binding_gets_no_gradient() {
        let s = store_with(&[("w", t(2, 2, 1))]);
        let mut g = Graph::new();
        let b = g.bind(&s, false);
        let l = g.squared_error(b.get(ParamId(0)), Tensor::zeros(2, 2));
        let grads = g.backward(l, &s);
        assert!(grads.get(ParamId(0)).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // value and slope are continuous at the knee
        assert!((smooth_l1(1.0 - 1e-12) - smooth_l1(1.0)).abs() < 1e-11);
        assert!((smooth_l1_grad(1.0 - 1e-12) - smooth_l1_grad(1.0)).abs() < 1e-11);
    }

    #[test]
    fn op_counts_track_kinds() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.add(a, a);
        g.add(b, a);
        assert_eq!(g.op_counts()["add"], 2);
        assert_eq!(g.op_counts()["input"], 1);
    }
}
