use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward closure of a user-defined op: maps the output gradient to one
/// gradient per input, in input order.
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Constant,
    Param(String),
    Variable,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    MulCol,
    Scale(f64),
    AddScalar,
    MatMul,
    Transpose,
    Concat(Vec<usize>),
    SliceCols(usize),
    Reshape,
    GatherRows(Vec<usize>),
    SegmentSum(Vec<usize>),
    SegmentMean(Vec<usize>, Vec<usize>),
    SegmentMax(Vec<usize>),
    SoftmaxRows,
    LayerNorm(Vec<f64>),
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    L2NormRows,
    NormalizeRows,
    Sum,
    Mean,
    Clamp(f64, f64),
    PosEnc(usize, bool),
    NeighborAttention {
        keys: Rc<Vec<Vec<usize>>>,
        scale: f64,
        weights: Vec<Vec<f64>>,
    },
    Custom(CustomBackward),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Variable => "variable",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::MulCol => "mul_col",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Concat(_) => "concat",
            Op::SliceCols(_) => "slice_cols",
            Op::Reshape => "reshape",
            Op::GatherRows(_) => "gather_rows",
            Op::SegmentSum(_) => "segment_sum",
            Op::SegmentMean(..) => "segment_mean",
            Op::SegmentMax(_) => "segment_max",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm(_) => "layer_norm",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Abs => "abs",
            Op::L2NormRows => "l2_norm",
            Op::NormalizeRows => "normalize_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Clamp(..) => "clamp",
            Op::PosEnc(..) => "positional_encoding",
            Op::NeighborAttention { .. } => "neighbor_attention",
            Op::Custom(_) => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Reverse-mode computation record over dense `f64` tensors.
///
/// Nodes are appended in evaluation order, so the tape is always a valid
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zero-filled if `v` does not influence the loss.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradient for every parameter block consumed by the forward pass.
    /// Blocks registered more than once have their gradients summed.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, idx) in &self.params {
            let g = self.wrt_or_zero(Var(*idx));
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Number of output columns of the positional encoding of a 3-vector.
pub fn posenc_width(levels: usize, passthrough: bool) -> usize {
    6 * levels + if passthrough { 3 } else { 0 }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) | Op::Variable => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    /// A leaf that receives gradients but is not tied to a parameter block.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable, &[])
    }

    /// A leaf holding a copy of the named block of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unregistered parameter block `{name}`")))?
            .clone();
        Ok(self.push(t, Op::Param(name.to_string()), &[]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul, &[a, b]))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div, &[a, b]))
    }

    fn broadcast_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(op, ta, tr));
        }
        Ok(())
    }

    /// `a + row` with the `1×c` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow, &[a, row]))
    }

    /// `a ∘ row` with the `1×c` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        Ok(self.push(v, Op::MulRow, &[a, row]))
    }

    /// `a ∘ col` with the `r×1` column broadcast over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let mut v = ta.clone();
        for i in 0..v.rows() {
            let s = tc.get(i, 0);
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        Ok(self.push(v, Op::MulCol, &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose, &[a])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        let widths = ts.iter().map(|t| t.cols()).collect();
        Ok(self.push(v, Op::Concat(widths), parts))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let v = t.slice_cols(start, end);
        Ok(self.push(v, Op::SliceCols(start), &[a]))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        Ok(self.push(v, Op::Reshape, &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape(),
                rhs: (bad, 0),
            });
        }
        let v = t.gather_rows(idx);
        Ok(self.push(v, Op::GatherRows(idx.to_vec()), &[a]))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &[usize], n: usize) -> Result<()> {
        let t = self.value(a);
        if seg.len() != t.rows() || seg.iter().any(|&s| s >= n) {
            return Err(Error::Shape {
                op,
                lhs: t.shape(),
                rhs: (seg.len(), n),
            });
        }
        Ok(())
    }

    /// Row sums per segment: output row `s` sums the rows `i` with `seg[i] == s`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, seg, n)?;
        let t = self.value(a);
        let mut v = Tensor::zeros(n, t.cols());
        for (i, &s) in seg.iter().enumerate() {
            for (o, x) in v.row_mut(s).iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        Ok(self.push(v, Op::SegmentSum(seg.to_vec()), &[a]))
    }

    /// Row means per segment. Empty segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_mean", a, seg, n)?;
        let t = self.value(a);
        let mut counts = vec![0usize; n];
        let mut v = Tensor::zeros(n, t.cols());
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            for (o, x) in v.row_mut(s).iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = 1.0 / c as f64;
                for o in v.row_mut(s) {
                    *o *= inv;
                }
            }
        }
        Ok(self.push(v, Op::SegmentMean(seg.to_vec(), counts), &[a]))
    }

    /// Columnwise max per segment. Ties go to the lowest row index; the chosen
    /// rows receive the whole gradient in the backward pass.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], n: usize) -> Result<Var> {
        self.check_segments("segment_max", a, seg, n)?;
        let (v, argmax) = segment_max_forward(self.value(a), seg, n)?;
        Ok(self.push(v, Op::SegmentMax(argmax), &[a]))
    }

    /// Row indices selected by a `segment_max` node, laid out like its output.
    pub fn segment_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::SegmentMax(a) => Some(a),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows, &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols() as f64;
        let mut v = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm(inv_std), &[a])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(v, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu, gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    /// Euclidean norm of each row, as an `r×1` column.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::from_vec(t.rows(), 1, data).expect("shape");
        self.push(v, Op::L2NormRows, &[a])
    }

    /// Each row divided by its Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
        self.push(v, Op::NormalizeRows, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(v, Op::Mean, &[a])
    }

    /// Sinusoidal encoding of an `n×3` tensor; see [`positional_encoding`].
    pub fn positional_encoding(&mut self, a: Var, levels: usize, passthrough: bool) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 3 || levels == 0 {
            return Err(Error::Shape {
                op: "positional_encoding",
                lhs: t.shape(),
                rhs: (levels, 3),
            });
        }
        let width = posenc_width(levels, passthrough);
        let mut v = Tensor::zeros(t.rows(), width);
        for r in 0..t.rows() {
            let x = [t.get(r, 0), t.get(r, 1), t.get(r, 2)];
            encode_into(&x, levels, passthrough, v.row_mut(r));
        }
        Ok(self.push(v, Op::PosEnc(levels, passthrough), &[a]))
    }

    /// Single-head attention where query row `i` only sees key rows
    /// `i` and `neighbors[i]`.
    pub fn neighbor_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        neighbors: Rc<Vec<Vec<usize>>>,
        scale: f64,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tk.rows() != tv.rows() || neighbors.len() != tq.rows() {
            return Err(shape_err("neighbor_attention", tq, tk));
        }
        let n = tq.rows();
        let mut keys: Vec<Vec<usize>> = Vec::with_capacity(n);
        for (i, nb) in neighbors.iter().enumerate() {
            let mut ks = Vec::with_capacity(nb.len() + 1);
            ks.push(i);
            for &j in nb {
                if j >= n {
                    return Err(Error::invalid(format!(
                        "neighbor_attention: neighbor index {j} out of range for {n} rows"
                    )));
                }
                if j != i {
                    ks.push(j);
                }
            }
            keys.push(ks);
        }
        let mut out = Tensor::zeros(n, tv.cols());
        let mut weights = Vec::with_capacity(n);
        for (i, ks) in keys.iter().enumerate() {
            let qi = tq.row(i);
            let mut w: Vec<f64> = ks
                .iter()
                .map(|&j| scale * dot(qi, tk.row(j)))
                .collect();
            softmax_in_place(&mut w);
            let orow = out.row_mut(i);
            for (&j, &a) in ks.iter().zip(&w) {
                for (o, x) in orow.iter_mut().zip(tv.row(j)) {
                    *o += a * x;
                }
            }
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::NeighborAttention {
                keys: Rc::new(keys),
                scale,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by a `neighbor_attention` node, as
    /// `(key index lists, weights)`; the first key of each row is the row itself.
    pub fn attention_weights(&self, v: Var) -> Option<(&[Vec<usize>], &[Vec<f64>])> {
        match &self.nodes[v.0].op {
            Op::NeighborAttention { keys, weights, .. } => Some((keys, weights)),
            _ => None,
        }
    }

    /// Records an op computed outside the graph. `backward` receives the output
    /// gradient and must return one gradient per input, shaped like the input.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, Op::Custom(backward), inputs)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let in_grads = self.node_backward(node, &g)?;
            for (&inp, ig) in node.inputs.iter().zip(in_grads) {
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let out = &node.value;
        let res = match &node.op {
            Op::Constant | Op::Param(_) | Op::Variable => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Op::Mul => vec![Some(g.zip_map(inp(1), |a, b| a * b)), Some(g.zip_map(inp(0), |a, b| a * b))],
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let ga = g.zip_map(b, |gg, bb| gg / bb);
                let mut gb = g.clone();
                for ((x, &av), &bv) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *x = -*x * av / (bv * bv);
                }
                vec![Some(ga), Some(gb)]
            }
            Op::AddRow => {
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                vec![Some(g.clone()), Some(gr)]
            }
            Op::MulRow => {
                let (a, row) = (inp(0), inp(1));
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, c, g.get(r, c) * row.get(0, c));
                        gr.data_mut()[c] += g.get(r, c) * a.get(r, c);
                    }
                }
                vec![Some(ga), Some(gr)]
            }
            Op::MulCol => {
                let (a, col) = (inp(0), inp(1));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(g.rows(), 1);
                for r in 0..g.rows() {
                    let s = col.get(r, 0);
                    let mut acc = 0.0;
                    for c in 0..g.cols() {
                        ga.set(r, c, g.get(r, c) * s);
                        acc += g.get(r, c) * a.get(r, c);
                    }
                    gc.set(r, 0, acc);
                }
                vec![Some(ga), Some(gc)]
            }
            Op::Scale(s) => vec![Some(g.map(|x| x * s))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let ga = g.matmul(&b.transpose())?;
                let gb = a.transpose().matmul(g)?;
                vec![Some(ga), Some(gb)]
            }
            Op::Transpose => vec![Some(g.transpose())],
            Op::Concat(widths) => {
                let mut start = 0;
                widths
                    .iter()
                    .map(|w| {
                        let s = g.slice_cols(start, start + w);
                        start += w;
                        Some(s)
                    })
                    .collect()
            }
            Op::SliceCols(start) => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows(), a.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                vec![Some(ga)]
            }
            Op::Reshape => {
                let a = inp(0);
                vec![Some(g.reshape(a.rows(), a.cols())?)]
            }
            Op::GatherRows(idx) => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows(), a.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                vec![Some(ga)]
            }
            Op::SegmentSum(seg) => vec![Some(g.gather_rows(seg))],
            Op::SegmentMean(seg, counts) => {
                let mut ga = g.gather_rows(seg);
                for (r, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for x in ga.row_mut(r) {
                        *x *= inv;
                    }
                }
                vec![Some(ga)]
            }
            Op::SegmentMax(argmax) => {
                let a = inp(0);
                let cols = a.cols();
                let mut ga = Tensor::zeros(a.rows(), cols);
                for (k, &src) in argmax.iter().enumerate() {
                    if src == usize::MAX {
                        continue;
                    }
                    let c = k % cols;
                    let cur = ga.get(src, c);
                    ga.set(src, c, cur + g.data()[k]);
                }
                vec![Some(ga)]
            }
            Op::SoftmaxRows => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let s = dot(g.row(r), y);
                    for (x, &yy) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = yy * (*x - s);
                    }
                }
                vec![Some(ga)]
            }
            Op::LayerNorm(inv_std) => {
                let c = g.cols() as f64;
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = dot(gr, y) / c;
                    for ((x, &gg), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *x = inv_std[r] * (gg - mg - yy * mgy);
                    }
                }
                vec![Some(ga)]
            }
            Op::Relu => vec![Some(g.zip_map(inp(0), |gg, x| if x > 0.0 { gg } else { 0.0 }))],
            Op::Gelu => vec![Some(g.zip_map(inp(0), |gg, x| gg * gelu_grad(x)))],
            Op::Sigmoid => vec![Some(g.zip_map(out, |gg, y| gg * y * (1.0 - y)))],
            Op::Tanh => vec![Some(g.zip_map(out, |gg, y| gg * (1.0 - y * y)))],
            Op::Exp => vec![Some(g.zip_map(out, |gg, y| gg * y))],
            Op::Log => vec![Some(g.zip_map(inp(0), |gg, x| gg / x))],
            Op::Sin => vec![Some(g.zip_map(inp(0), |gg, x| gg * x.cos()))],
            Op::Cos => vec![Some(g.zip_map(inp(0), |gg, x| -gg * x.sin()))],
            Op::Abs => vec![Some(g.zip_map(inp(0), |gg, x| {
                if x > 0.0 {
                    gg
                } else if x < 0.0 {
                    -gg
                } else {
                    0.0
                }
            }))],
            Op::Clamp(lo, hi) => vec![Some(g.zip_map(inp(0), |gg, x| {
                if x >= *lo && x <= *hi {
                    gg
                } else {
                    0.0
                }
            }))],
            Op::L2NormRows => {
                let a = inp(0);
                let mut ga = a.clone();
                for r in 0..a.rows() {
                    let n = out.get(r, 0);
                    let s = if n > 0.0 { g.get(r, 0) / n } else { 0.0 };
                    for x in ga.row_mut(r) {
                        *x *= s;
                    }
                }
                vec![Some(ga)]
            }
            Op::NormalizeRows => {
                let a = inp(0);
                let mut ga = g.clone();
                for r in 0..a.rows() {
                    let n = a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let y = out.row(r);
                    let yg = dot(y, g.row(r));
                    for (x, &yy) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = if n > 0.0 { (*x - yy * yg) / n } else { 0.0 };
                    }
                }
                vec![Some(ga)]
            }
            Op::Sum => {
                let a = inp(0);
                vec![Some(Tensor::filled(a.rows(), a.cols(), g.item()))]
            }
            Op::Mean => {
                let a = inp(0);
                let s = g.item() / a.len().max(1) as f64;
                vec![Some(Tensor::filled(a.rows(), a.cols(), s))]
            }
            Op::PosEnc(levels, passthrough) => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.rows(), 3);
                let off = if *passthrough { 3 } else { 0 };
                for r in 0..a.rows() {
                    let gr = g.row(r);
                    for c in 0..3 {
                        let x = a.get(r, c);
                        let mut acc = if *passthrough { gr[c] } else { 0.0 };
                        for l in 0..*levels {
                            let w = (1u64 << l) as f64 * PI;
                            let base = off + c * 2 * levels + 2 * l;
                            acc += gr[base] * w * (w * x).cos() - gr[base + 1] * w * (w * x).sin();
                        }
                        ga.set(r, c, acc);
                    }
                }
                vec![Some(ga)]
            }
            Op::NeighborAttention {
                keys,
                scale,
                weights,
            } => {
                let (q, k, v) = (inp(0), inp(1), inp(2));
                let mut gq = Tensor::zeros(q.rows(), q.cols());
                let mut gk = Tensor::zeros(k.rows(), k.cols());
                let mut gv = Tensor::zeros(v.rows(), v.cols());
                for (i, ks) in keys.iter().enumerate() {
                    let gi = g.row(i);
                    let w = &weights[i];
                    let da: Vec<f64> = ks.iter().map(|&j| dot(gi, v.row(j))).collect();
                    let s: f64 = w.iter().zip(&da).map(|(a, d)| a * d).sum();
                    for ((&j, &a), &d) in ks.iter().zip(w).zip(&da) {
                        for (o, x) in gv.row_mut(j).iter_mut().zip(gi) {
                            *o += a * x;
                        }
                        let ds = a * (d - s) * scale;
                        for (o, x) in gq.row_mut(i).iter_mut().zip(k.row(j)) {
                            *o += ds * x;
                        }
                        for (o, x) in gk.row_mut(j).iter_mut().zip(q.row(i)) {
                            *o += ds * x;
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }
            Op::Custom(f) => {
                let gs = f(g);
                if gs.len() != node.inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom op returned {} gradients for {} inputs",
                        gs.len(),
                        node.inputs.len()
                    )));
                }
                for (k, gk) in gs.iter().enumerate() {
                    if gk.shape() != inp(k).shape() {
                        return Err(shape_err("custom", inp(k), gk));
                    }
                }
                gs.into_iter().map(Some).collect()
            }
        };
        Ok(res)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // all -inf (or empty): leave a uniform row rather than NaNs
        let u = 1.0 / row.len().max(1) as f64;
        row.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn segment_max_forward(t: &Tensor, seg: &[usize], n: usize) -> Result<(Tensor, Vec<usize>)> {
    let cols = t.cols();
    let mut v = Tensor::filled(n, cols, f64::NEG_INFINITY);
    let mut argmax = vec![usize::MAX; n * cols];
    for (i, &s) in seg.iter().enumerate() {
        for c in 0..cols {
            let x = t.get(i, c);
            // strict comparison keeps the lowest index on ties
            if argmax[s * cols + c] == usize::MAX || x > v.get(s, c) {
                v.set(s, c, x);
                argmax[s * cols + c] = i;
            }
        }
    }
    if argmax.iter().any(|&a| a == usize::MAX) && cols > 0 {
        return Err(Error::invalid("segment_max: empty segment"));
    }
    Ok((v, argmax))
}

fn encode_into(x: &[f64; 3], levels: usize, passthrough: bool, out: &mut [f64]) {
    let mut k = 0;
    if passthrough {
        out[..3].copy_from_slice(x);
        k = 3;
    }
    for &xc in x {
        for l in 0..levels {
            let w = (1u64 << l) as f64 * PI;
            out[k] = (w * xc).sin();
            out[k + 1] = (w * xc).cos();
            k += 2;
        }
    }
}

/// Sinusoidal encoding `[sin(2⁰πx), cos(2⁰πx), …, sin(2^{L-1}πx), cos(2^{L-1}πx)]`
/// per coordinate, coordinate-major, optionally preceded by `x` itself.
pub fn positional_encoding(x: [f64; 3], levels: usize, passthrough: bool) -> Vec<f64> {
    let mut out = vec![0.0; posenc_width(levels, passthrough)];
    encode_into(&x, levels, passthrough, &mut out);
    out
}
