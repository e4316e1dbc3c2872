//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive pushes
//! one node holding its output value and enough saved state to evaluate its
//! adjoint; [`Graph::backward`] walks the record once in reverse.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::tensor::{matmul_at_acc, matmul_bt_into, matmul_into};
use crate::numeric::{ParamId, ParamSet, Tensor};

const PAR_THRESHOLD: usize = 1 << 18;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::InvalidConfig(format!("unknown activation `{s}` (expected gelu or relu)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    MeanAll(Var),
    Concat(Vec<Var>, Axis),
    NarrowCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        windows: Vec<f64>,
    },
    Huber {
        pred: Var,
        residual: Vec<f64>,
        delta: f64,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradient record produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: vec![None; params.len()],
            shapes: params.iter().map(|(_, _, t)| t.shape().to_vec()).collect(),
        }
    }

    /// Gradient for `id`; exactly zero when the parameter was unreachable.
    pub fn get(&self, id: ParamId) -> Cow<'_, Tensor> {
        match &self.grads[id.index()] {
            Some(t) => Cow::Borrowed(t),
            None => Cow::Owned(Tensor::zeros(&self.shapes[id.index()])),
        }
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.grads[id.index()].is_some()
    }

    /// Adds `other` in place. Both records must come from the same [`ParamSet`] layout.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.scale_assign(c);
        }
    }
}

/// Operation record for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let c = t.cols();
    (t.len() / c, c)
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, arow)| matmul_into(arow, b, o, 1, k, n));
    } else {
        matmul_into(a, b, &mut out, m, k, n);
    }
    out
}

fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, arow)| matmul_bt_into(arow, b, o, 1, k, n));
    } else {
        matmul_bt_into(a, b, &mut out, m, k, n);
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`, parallel over output rows when large.
fn matmul_at(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(p, orow)| {
            for i in 0..m {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                    *o += av * bv;
                }
            }
        });
    } else {
        matmul_at_acc(a, b, out, m, k, n);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn add_into_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Leaf bound to a parameter's current value but cut from the gradient record.
    pub fn param_detached(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, b: Var) -> Result<()> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            return Err(Error::shape(op, tx.shape(), tb.shape()));
        }
        Ok(())
    }

    /// `x[.., n] + b[n]` broadcast over rows (affine bias).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast_check("add_row", x, b)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_row", v, Op::AddRow(x, b), &[x, b])
    }

    /// `x[.., n] ⊙ s[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        self.row_broadcast_check("mul_row", x, s)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data()[i % n])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("mul_row", v, Op::MulRow(x, s), &[x, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let v = Tensor::new(vec![m, n], matmul(ta.data(), tb.data(), m, k, n))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul_bt", ta)?;
        let (n, k2) = require_2d("matmul_bt", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", ta.shape(), tb.shape()));
        }
        let v = Tensor::new(vec![m, n], matmul_bt(ta.data(), tb.data(), m, k, n))?;
        self.push("matmul_bt", v, Op::MatMulBt(a, b), &[a, b])
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = require_2d("transpose", ta)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, n) = dims2(ta);
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.row_broadcast_check("layer_norm", x, gamma)?;
        self.row_broadcast_check("layer_norm", x, beta)?;
        let tx = self.value(x);
        let (rows, n) = dims2(tx);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push("gelu", v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Gelu => self.gelu(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    fn reduce(&self, a: Var, axis: Axis, scale_by_count: bool) -> Result<Tensor> {
        let ta = self.value(a);
        let (m, n) = require_2d("reduce", ta)?;
        Ok(match axis {
            Axis::Rows => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(ta.row(i)) {
                        *o += v;
                    }
                }
                if scale_by_count {
                    out.iter_mut().for_each(|o| *o /= m as f64);
                }
                Tensor::new(vec![1, n], out)?
            }
            Axis::Cols => {
                let out = (0..m)
                    .map(|i| {
                        let s: f64 = ta.row(i).iter().sum();
                        if scale_by_count {
                            s / n as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                Tensor::new(vec![m, 1], out)?
            }
        })
    }

    /// Sum of a 2-D tensor along `axis`; the reduced axis keeps extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.reduce(a, axis, false)?;
        self.push("sum", v, Op::Sum(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.reduce(a, axis, true)?;
        self.push("mean", v, Op::Mean(a, axis), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let v = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        self.push("mean_all", v, Op::MeanAll(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]);
        let (_, c0) = require_2d("concat", first)?;
        let r0 = first.rows();
        let v = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = require_2d("concat", t)?;
                    if c != c0 {
                        return Err(Error::shape("concat", first.shape(), t.shape()));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (r, c) = require_2d("concat", t)?;
                    if r != r0 {
                        return Err(Error::shape("concat", first.shape(), t.shape()));
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![r0, cols], data)?
            }
        };
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_2d("narrow_cols", tx)?;
        if len == 0 || start + len > n {
            return Err(Error::shape("narrow_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        self.push("narrow_cols", v, Op::NarrowCols { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = require_2d("gather_rows", tx)?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let v = Tensor::new(vec![idx.len(), n], data)?;
        self.push(
            "gather_rows",
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// One-dimensional convolution over `input[L×m]` with `kernel[d × (width·m)]`
    /// (tap-major, channel-minor) and `bias[d]`, producing `[(L−width)/stride+1 × d]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, width: usize, stride: usize) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let (len, m) = require_2d("conv1d", ti)?;
        let (d, km) = require_2d("conv1d", tk)?;
        if width == 0 || stride == 0 || km != width * m || tb.len() != d || len < width {
            return Err(Error::shape("conv1d", ti.shape(), tk.shape()));
        }
        let positions = (len - width) / stride + 1;
        let mut windows = Vec::with_capacity(positions * km);
        for p in 0..positions {
            let start = p * stride * m;
            windows.extend_from_slice(&ti.data()[start..start + km]);
        }
        let mut out = matmul_bt(&windows, tk.data(), positions, km, d);
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(vec![positions, d], out)?;
        self.push(
            "conv1d",
            v,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                windows,
            },
            &[input, kernel, bias],
        )
    }

    /// Mean elementwise Huber penalty of `target − pred`. `target` is treated
    /// as a stop-gradient input.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        self.same_shape("huber", pred, target)?;
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
        }
        let (tp, tt) = (self.value(pred), self.value(target));
        let residual: Vec<f64> = tt.data().iter().zip(tp.data()).map(|(t, p)| t - p).collect();
        let total: f64 = residual.iter().map(|&r| huber_value(r, delta)).sum();
        let v = Tensor::scalar(total / residual.len() as f64);
        self.push("huber", v, Op::Huber { pred, residual, delta }, &[pred])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against constant labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.len() != labels.len() {
            return Err(Error::shape("bce", tl.shape(), &[labels.len()]));
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let v = Tensor::scalar(total / labels.len() as f64);
        self.push(
            "bce",
            v,
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`; consumes the record.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(pid) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                if !t.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: self.params.name(pid).to_string(),
                    });
                }
                match &mut out.grads[pid.index()] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.needs(v);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(a) && need(b) {
                    add_into(&mut grads[b.0], g.clone());
                    add_into(&mut grads[a.0], g);
                } else if need(a) {
                    add_into(&mut grads[a.0], g);
                } else if need(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if need(b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
                if need(a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    let c = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], c);
                }
                if need(b) {
                    let c = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], c);
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    add_into(&mut grads[a.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddRow(x, b) => {
                let n = val(b).len();
                if need(b) {
                    add_into_with(&mut grads[b.0], n, |gb| {
                        for row in g.chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
                if need(x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::MulRow(x, s) => {
                let ts = val(s).data();
                let n = ts.len();
                if need(s) {
                    let tx = val(x).data();
                    add_into_with(&mut grads[s.0], n, |gs| {
                        for (row, xrow) in g.chunks(n).zip(tx.chunks(n)) {
                            for j in 0..n {
                                gs[j] += row[j] * xrow[j];
                            }
                        }
                    });
                }
                if need(x) {
                    let c = g.iter().enumerate().map(|(i, v)| v * ts[i % n]).collect();
                    add_into(&mut grads[x.0], c);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if need(a) {
                    add_into(&mut grads[a.0], matmul_bt(&g, tb.data(), m, n, k));
                }
                if need(b) {
                    add_into_with(&mut grads[b.0], k * n, |gb| matmul_at(ta.data(), &g, gb, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if need(a) {
                    add_into(&mut grads[a.0], matmul(&g, tb.data(), m, n, k));
                }
                if need(b) {
                    add_into_with(&mut grads[b.0], n * k, |gb| matmul_at(&g, ta.data(), gb, m, n, k));
                }
            }
            Op::Transpose(a) => {
                if need(a) {
                    let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                    let mut c = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            c[i * n + j] = g[j * m + i];
                        }
                    }
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::Softmax(a) => {
                if need(a) {
                    let (rows, n) = dims2(out);
                    let y = out.data();
                    let mut c = vec![0.0; rows * n];
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                        for j in 0..n {
                            c[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let (rows, n) = dims2(out);
                if need(beta) {
                    add_into_with(&mut grads[beta.0], n, |gb| {
                        for row in g.chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
                if need(gamma) {
                    add_into_with(&mut grads[gamma.0], n, |gg| {
                        for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += row[j] * hrow[j];
                            }
                        }
                    });
                }
                if need(x) {
                    let gm = val(gamma).data();
                    let nf = n as f64;
                    let mut c = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            c[r * n + j] = is / nf * (nf * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                    add_into(&mut grads[x.0], c);
                }
            }
            Op::Gelu(a) => {
                if need(a) {
                    let c = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gv, &x)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::Relu(a) => {
                if need(a) {
                    let c = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::Sigmoid(a) => {
                if need(a) {
                    let c = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, &y)| gv * y * (1.0 - y))
                        .collect();
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                if need(a) {
                    let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                    let mean = matches!(op, Op::Mean(..));
                    let mut c = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            c[i * n + j] = match axis {
                                Axis::Rows if mean => g[j] / m as f64,
                                Axis::Rows => g[j],
                                Axis::Cols if mean => g[i] / n as f64,
                                Axis::Cols => g[i],
                            };
                        }
                    }
                    add_into(&mut grads[a.0], c);
                }
            }
            Op::MeanAll(a) => {
                if need(a) {
                    let n = val(a).len();
                    add_into(&mut grads[a.0], vec![g[0] / n as f64; n]);
                }
            }
            Op::Concat(ref parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if need(p) {
                            add_into(&mut grads[p.0], g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let total = out.cols();
                    let rows = out.rows();
                    let mut col = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if need(p) {
                            let mut part = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                part.extend_from_slice(&g[i * total + col..i * total + col + c]);
                            }
                            add_into(&mut grads[p.0], part);
                        }
                        col += c;
                    }
                }
            },
            Op::NarrowCols { x, start } => {
                if need(x) {
                    let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                    let len = out.cols();
                    add_into_with(&mut grads[x.0], m * n, |gx| {
                        for i in 0..m {
                            for j in 0..len {
                                gx[i * n + start + j] += g[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, ref idx } => {
                if need(x) {
                    let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                    add_into_with(&mut grads[x.0], m * n, |gx| {
                        for (r, &src) in idx.iter().enumerate() {
                            for j in 0..n {
                                gx[src * n + j] += g[r * n + j];
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if need(x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                ref windows,
                ..
            } => {
                let (d, km) = (val(kernel).shape()[0], val(kernel).shape()[1]);
                let positions = out.rows();
                if need(bias) {
                    add_into_with(&mut grads[bias.0], d, |gb| {
                        for row in g.chunks(d) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
                if need(kernel) {
                    add_into_with(&mut grads[kernel.0], d * km, |gk| {
                        matmul_at(&g, windows, gk, positions, d, km)
                    });
                }
                if need(input) {
                    let m = val(input).cols();
                    let total = val(input).len();
                    let dwin = matmul(&g, val(kernel).data(), positions, d, km);
                    add_into_with(&mut grads[input.0], total, |gi| {
                        for p in 0..positions {
                            let start = p * stride * m;
                            for (o, v) in gi[start..start + km].iter_mut().zip(&dwin[p * km..(p + 1) * km]) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Huber {
                pred,
                ref residual,
                delta,
            } => {
                if need(pred) {
                    let n = residual.len() as f64;
                    let c = residual
                        .iter()
                        .map(|&r| -g[0] * huber_slope(r, delta) / n)
                        .collect();
                    add_into(&mut grads[pred.0], c);
                }
            }
            Op::BceLogits { logits, ref labels } => {
                if need(logits) {
                    let n = labels.len() as f64;
                    let c = val(logits)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                        .collect();
                    add_into(&mut grads[logits.0], c);
                }
            }
        }
    }
}

/// Huber penalty of a single residual.
pub fn huber_value(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber_value`] with respect to the residual.
pub fn huber_slope(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::scalar(value));
        (ps, id)
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let (ps, id) = single(3.0);
        let mut g = Graph::new(&ps);
        let x = g.param(id);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).item(), 6.0);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", Tensor::scalar(2.0));
        let b = ps.insert("b", Tensor::full(&[2, 3], 1.5));
        let mut g = Graph::new(&ps);
        let x = g.param(a);
        let _unused = g.param(b);
        let y = g.scale(x, 4.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).item(), 4.0);
        assert!(!grads.is_reached(b));
        assert!(grads.get(b).data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.get(b).shape(), &[2, 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new(&ps);
        let x = g.param(a);
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn non_finite_output_is_a_numeric_failure() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::scalar(f64::MAX));
        let r = g.scale(a, 10.0);
        assert!(matches!(r, Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let i = g.constant(Tensor::eye(2));
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap());
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let a = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_with_stride_equal_to_width_is_blockwise_dot() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        // L=4, m=1, width=2 -> 2 positions, d=1
        let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 2], vec![10.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.conv1d(x, k, b, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[12.5, 34.5]);
    }

    #[test]
    fn detached_param_gets_no_gradient() {
        let (ps, id) = single(2.0);
        let mut g = Graph::new(&ps);
        let x = g.param(id);
        let d = g.param_detached(id);
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).item(), 2.0);
    }
}
