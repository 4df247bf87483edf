//! Reverse-mode differentiation over a per-pass recorded graph.
//!
//! A [`Graph`] borrows the parameter store for the duration of one forward
//! pass. Every operation appends a node; nodes are created in topological
//! order, so [`Graph::backward`] is a single reverse sweep. The graph is
//! dropped after backward; nothing persists between passes except the
//! gradients accumulated into a [`GradStore`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{GradStore, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad_left: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MaxPoolPrev(Var, Vec<bool>),
    Gmm {
        w: Var,
        mu: Var,
        sigma: Var,
    },
    Reshape(Var),
}

/// Names accepted by [`Graph::inject_backward_fault`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "affine",
    "mul_const",
    "relu",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "abs",
    "softmax_rows",
    "layer_norm",
    "conv1d",
    "gather_rows",
    "concat_cols",
    "slice_cols",
    "concat_rows",
    "slice_rows",
    "sum",
    "mean",
    "max_pool",
    "gmm",
    "reshape",
];

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::MulConst(..) => "mul_const",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxPoolPrev(..) => "max_pool",
            Op::Gmm { .. } => "gmm",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxPoolPrev(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::SliceRows { src, .. } => vec![*src],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Gmm { w, mu, sigma } => vec![*w, *mu, *sigma],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout_rng: Option<RngStream>,
    fault: Option<&'static str>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1..].iter().product())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            dropout_rng: None,
            fault: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(params: &'p ParamStore, rng: RngStream) -> Self {
        let mut g = Self::new(params);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
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

    /// Test fixture: scale the upstream gradient of every `op` node by 1.5
    /// during backward, producing a deliberately wrong derivative.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.input(Tensor::zeros(shape))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).iter().map(|&a| f(a)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(b).len() != 2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return shape_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    /// Left-to-right sum of equally shaped terms.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mul(a, b)))
    }

    /// Adds vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return shape_err("add_row", self.shape(x), self.shape(b));
        }
        let bv = self.value(b);
        let mut data = self.value(x).to_vec();
        for i in 0..m {
            for (d, &bj) in data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *d += bj;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddRow(x, b)))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |a| scale * a + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xs = self.value(x);
        if xs.iter().any(|a| a.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = libm::exp(xj - mx);
                s += *oj;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(x)))
    }

    /// Per-row normalisation followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// 1-D convolution over rows of `x [T×C_in]` with `w [k×C_in×C_out]`,
    /// `pad_left` zero rows before the sequence and zeros after it; output
    /// length is `T`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad_left: usize) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || self.value(b).len() != ws[2] || pad_left >= ws[0] {
            return shape_err("conv1d", self.shape(x), &ws);
        }
        let (k, cout) = (ws[0], ws[2]);
        let mut out = vec![0.0; t * cout];
        for i in 0..t {
            out[i * cout..(i + 1) * cout].copy_from_slice(self.value(b));
        }
        let xs = self.value(x);
        let wv = self.value(w);
        for s in 0..k {
            if let Some((t0, t1, src0)) = conv_range(t, s, pad_left) {
                let block = &wv[s * cin * cout..(s + 1) * cin * cout];
                matmul_acc(
                    &xs[src0 * cin..(src0 + t1 - t0) * cin],
                    block,
                    &mut out[t0 * cout..t1 * cout],
                    t1 - t0,
                    cin,
                    cout,
                );
            }
        }
        Ok(self.push(vec![t, cout], out, Op::Conv1d { x, w, b, pad_left }))
    }

    /// Same-length convolution with an odd kernel, centred on each position.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = self.shape(w)[0];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "same-padded convolution needs an odd kernel, got {k}"
            )));
        }
        self.conv1d(x, w, b, k / 2)
    }

    /// Output row `r` is row `idx[r]` of `src`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(src);
        if idx.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let xs = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        Ok(self.push(vec![idx.len(), n], out, Op::GatherRows(src, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| Error::Contract("concat of no parts".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return shape_err("concat_cols", self.shape(parts[0]), self.shape(p));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.dims(p);
                out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(src);
        if len == 0 || start + len > n {
            return shape_err("slice_cols", self.shape(src), &[start, len]);
        }
        let xs = self.value(src);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols { src, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::Contract("concat of no parts".into()))?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return shape_err("concat_rows", self.shape(parts[0]), self.shape(p));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(src);
        if len == 0 || start + len > m {
            return shape_err("slice_rows", self.shape(src), &[start, len]);
        }
        let out = self.value(src)[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Op::SliceRows { src, start }))
    }

    pub fn row(&mut self, src: Var, i: usize) -> Result<Var> {
        self.slice_rows(src, i, 1)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Mean absolute difference between equally shaped `a` and `b`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Width-2, stride-1 max pooling along time: `y[t] = max(x[t-1], x[t])`,
    /// with nothing before the first row.
    pub fn max_pool_prev(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.value(x);
        let mut out = xs.to_vec();
        let mut take_prev = vec![false; m * n];
        for i in 1..m {
            for j in 0..n {
                let prev = xs[(i - 1) * n + j];
                if prev > xs[i * n + j] {
                    out[i * n + j] = prev;
                    take_prev[i * n + j] = true;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::MaxPoolPrev(x, take_prev))
    }

    /// Mixture of normalised Gaussians evaluated at positions `0..len`:
    /// `y[j] = Σ_m w_m · N(j; mu_m, sigma_m²)`. Output shape `[1×len]`.
    pub fn gmm_density(&mut self, w: Var, mu: Var, sigma: Var, len: usize) -> Result<Var> {
        let mcount = self.value(w).len();
        if self.value(mu).len() != mcount || self.value(sigma).len() != mcount {
            return shape_err("gmm_density", self.shape(w), self.shape(mu));
        }
        if len == 0 {
            return Err(Error::Contract("gmm over zero positions".into()));
        }
        let (wv, mv, sv) = (self.value(w), self.value(mu), self.value(sigma));
        if sv.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Numeric("mixture scale must be positive".into()));
        }
        let mut out = vec![0.0; len];
        for (j, o) in out.iter_mut().enumerate() {
            let pos = j as f64;
            for m in 0..mcount {
                let z = (pos - mv[m]) / sv[m];
                *o += wv[m] * INV_SQRT_2PI / sv[m] * libm::exp(-0.5 * z * z);
            }
        }
        Ok(self.push(vec![1, len], out, Op::Gmm { w, mu, sigma }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return shape_err("reshape", self.shape(x), shape);
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; in evaluation
    /// mode (or with `p == 0`) the input node itself is returned.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.unit() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::MulConst(x, mask))
    }

    /// Copy of `x` with no edge back into the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.tensor(x);
        self.push_leaf(t, false)
    }

    /// Parameters whose gradient can be influenced by `from`, following
    /// recorded edges only (detached copies are not traversed).
    pub fn reachable_params(&self, from: Var) -> Vec<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        let mut out = Vec::new();
        while let Some(v) = stack.pop() {
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            let node = &self.nodes[v.0];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                out.push(id);
            }
            stack.extend(node.op.inputs());
        }
        out.sort();
        out
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.name()) {
                g.iter_mut().for_each(|x| *x *= 1.5);
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => unreachable!("parameters are leaves"),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    matmul_nt_acc(g, bv, da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_tn_acc(av, g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    matmul_acc(g, bv, da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_tn_acc(g, av, db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.slot(grads, *a) {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let (m, n) = self.dims(*x);
                if let Some(d) = self.slot(grads, *b) {
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::MulConst(x, mask) => {
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * sigmoid(xv[j]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j];
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            d[j] += g[j];
                        } else if xv[j] < 0.0 {
                            d[j] -= g[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = self.dims(*x);
                if let Some(d) = self.slot(grads, *x) {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma);
                if let Some(d) = self.slot(grads, *x) {
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * n + j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            d[r * n + j] += rstd[r] * (dh - mean_dh - xhat[r * n + j] * mean_dh_h);
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *gamma) {
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, pad_left } => {
                let (t, cin) = self.dims(*x);
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[2]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                if let Some(d) = self.slot(grads, *x) {
                    for s in 0..k {
                        if let Some((t0, t1, src0)) = conv_range(t, s, *pad_left) {
                            let block = &wv[s * cin * cout..(s + 1) * cin * cout];
                            matmul_nt_acc(
                                &g[t0 * cout..t1 * cout],
                                block,
                                &mut d[src0 * cin..(src0 + t1 - t0) * cin],
                                t1 - t0,
                                cout,
                                cin,
                            );
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *w) {
                    for s in 0..k {
                        if let Some((t0, t1, src0)) = conv_range(t, s, *pad_left) {
                            matmul_tn_acc(
                                &xv[src0 * cin..(src0 + t1 - t0) * cin],
                                &g[t0 * cout..t1 * cout],
                                &mut d[s * cin * cout..(s + 1) * cin * cout],
                                t1 - t0,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for r in 0..t {
                        for j in 0..cout {
                            d[j] += g[r * cout + j];
                        }
                    }
                }
            }
            Op::GatherRows(src, idx) => {
                let n = self.dims(*src).1;
                if let Some(d) = self.slot(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            d[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rows_cols(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    if let Some(d) = self.slot(grads, p) {
                        for r in 0..m {
                            for j in 0..pn {
                                d[r * pn + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += pn;
                }
            }
            Op::SliceCols { src, start } => {
                let (m, n) = self.dims(*src);
                let len = node.shape[1];
                if let Some(d) = self.slot(grads, *src) {
                    for r in 0..m {
                        for j in 0..len {
                            d[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(d, g)| *d += g);
                    }
                    off += len;
                }
            }
            Op::SliceRows { src, start } => {
                let n = self.dims(*src).1;
                if let Some(d) = self.slot(grads, *src) {
                    d[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MaxPoolPrev(x, take_prev) => {
                let n = self.dims(*x).1;
                if let Some(d) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        if take_prev[j] {
                            d[j - n] += g[j];
                        } else {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Gmm { w, mu, sigma } => {
                let (wv, mv, sv) = (self.value(*w), self.value(*mu), self.value(*sigma));
                let mcount = wv.len();
                let mut dw = vec![0.0; mcount];
                let mut dmu = vec![0.0; mcount];
                let mut dsig = vec![0.0; mcount];
                for (j, &gj) in g.iter().enumerate() {
                    let pos = j as f64;
                    for m in 0..mcount {
                        let diff = pos - mv[m];
                        let z = diff / sv[m];
                        let phi = INV_SQRT_2PI / sv[m] * libm::exp(-0.5 * z * z);
                        dw[m] += gj * phi;
                        dmu[m] += gj * wv[m] * phi * diff / (sv[m] * sv[m]);
                        dsig[m] += gj * wv[m] * phi * (z * z - 1.0) / sv[m];
                    }
                }
                for (v, dv) in [(*w, dw), (*mu, dmu), (*sigma, dsig)] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(&dv).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }
}

/// Output rows `t0..t1` read input rows starting at `src0` for kernel tap `s`.
fn conv_range(t: usize, s: usize, pad_left: usize) -> Option<(usize, usize, usize)> {
    // src = out + s - pad_left must lie in 0..t
    let t0 = pad_left.saturating_sub(s);
    let t1 = (t + pad_left).saturating_sub(s).min(t);
    if t0 >= t1 {
        return None;
    }
    Some((t0, t1, t0 + s - pad_left))
}

/// Result of a backward sweep. Interior gradients are released as the sweep
/// passes them; leaf and parameter gradients are kept.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, or `None` if no path
    /// reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds parameter gradients into `store` (repeated calls accumulate).
    pub fn accumulate_into(&self, store: &mut GradStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn conv_identity_and_box_kernels() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[1], &[0.0]));
        let id = g.input(t(&[3, 1, 1], &[0.0, 1.0, 0.0]));
        let y = g.conv1d_same(x, id, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.input(t(&[3, 1, 1], &[1.0, 1.0, 1.0]));
        let y = g.conv1d_same(x, ones, b).unwrap();
        assert_eq!(g.value(y), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[5, 2]));
        let w = g.input(Tensor::filled(&[3, 2, 3], 0.7));
        let b = g.input(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv1d_same(x, w, b).unwrap();
        for r in 0..5 {
            assert_eq!(&g.value(y)[r * 3..r * 3 + 3], &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn conv_even_kernel_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[5, 1]));
        let w = g.input(Tensor::zeros(&[2, 1, 1]));
        let b = g.input(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d_same(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ones = g.input(Tensor::filled(&[2], 1.0));
        let zeros = g.input(Tensor::zeros(&[2]));
        let c = g.input(t(&[1, 2], &[3.0, 3.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let x = g.input(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-10);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-10);
        let b = g.input(t(&[2], &[0.25, 0.25]));
        let y = g.layer_norm(x, zeros, b, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.25, 0.25]);
    }

    #[test]
    fn softmax_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(&[1, 4], 0.3));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.25; 4]);
        let x = g.input(t(&[1, 2], &[core::f64::consts::LN_2, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = g.input(t(&[3, 1], &[5.0, -2.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y), &[1.0, 1.0, 1.0]);
        let x = g.input(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_polynomial() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_detaches() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let e = g.exp(x);
        let d = g.stop_gradient(e);
        let d2 = g.stop_gradient(d);
        assert!(g.tensor(d).bitwise_eq(&g.tensor(e)));
        assert!(g.tensor(d2).bitwise_eq(&g.tensor(d)));
        assert!(!g.requires_grad(d));
        let s = g.mul(d2, d2).unwrap();
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[3.0, -1.0])).unwrap();
        let mut acc = GradStore::zeros_like(&store);
        for _ in 0..2 {
            let mut g = Graph::new(&store);
            let p = g.param(w);
            let sq = g.mul(p, p).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap().accumulate_into(&mut acc);
        }
        assert_eq!(acc.get(w), &[12.0, -4.0]);
    }

    #[test]
    fn unreachable_param_has_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(&[2], 1.0)).unwrap();
        let b = store.add("b", Tensor::filled(&[2], 1.0)).unwrap();
        let mut g = Graph::new(&store);
        let pa = g.param(a);
        let _pb = g.param(b);
        let l = g.sum(pa);
        let grads = g.backward(l).unwrap();
        let mut acc = GradStore::zeros_like(&store);
        grads.accumulate_into(&mut acc);
        assert!(acc.is_zero(b));
        assert_eq!(g.reachable_params(l), vec![a]);
    }

    #[test]
    fn gmm_peaks_at_mean() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let w = g.input(t(&[1, 1], &[1.0]));
        let mu = g.input(t(&[1, 1], &[2.0]));
        let s = g.input(t(&[1, 1], &[0.05]));
        let y = g.gmm_density(w, mu, s, 5).unwrap();
        let v = g.value(y);
        let arg = (0..5).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
        assert_eq!(arg, 2);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::filled(&[3, 3], 2.0));
        assert_eq!(g.dropout(x, 0.5), x);
    }
}
