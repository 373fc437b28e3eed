//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep. Parameters live
//! in a [`ParamStore`] that outlives the graph; a graph only borrows their values and
//! hands back a [`Gradients`] table when the pass is done.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{matmul_into, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    out_c: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }
    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<F> },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { x: Var, axis: usize },
    Dropout { x: Var, mask: Vec<F> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    L2Normalize { x: Var, denom: Vec<F> },
    GatherRows { x: Var, indices: Vec<usize> },
    Attention(Box<AttentionState<F>>),
}

struct AttentionState<F> {
    qkv: Var,
    segments: Vec<(usize, usize)>,
    heads: usize,
    /// Row-major `len×len` probability matrices, one per (segment, head).
    probs: Vec<Vec<F>>,
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<'s, F: Scalar> {
    store: Option<&'s ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Tensor<F>>,
    param_grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<'static, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<'static, F> {
    /// A graph without parameters; inputs are leaves.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            leaf_grads: HashMap::new(),
            param_grads: Vec::new(),
        }
    }
}

impl<'s, F: Scalar> Graph<'s, F> {
    pub fn with_params(store: &'s ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            leaf_grads: HashMap::new(),
            param_grads: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf or parameter node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.param_grads.get(id.0).and_then(|g| g.as_ref()),
            _ => self.leaf_grads.get(&v.0),
        }
    }

    /// Attention probabilities recorded by [`Graph::causal_attention`], one row-major
    /// `len×len` matrix per (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<F>]> {
        match &self.nodes[v.0].op {
            Op::Attention(st) => Some(&st.probs),
            _ => None,
        }
    }

    pub fn gradients(&self) -> Gradients<F> {
        Gradients {
            per_param: self.param_grads.clone(),
        }
    }

    pub fn into_gradients(self) -> Gradients<F> {
        Gradients {
            per_param: self.param_grads,
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- leaves

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let requires_grad = store.get(id).requires_grad;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(b) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push("add_bias", t, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(&[x]);
        self.push("relu", t, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_fwd);
        let rg = self.rg(&[x]);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push("tanh", t, Op::Tanh(x), rg)
    }

    // ---------------------------------------------------------------- linear

    /// 2-D matrix product `a · b` (or `a · bᵀ` when `trans_b`).
    pub fn matmul_opt(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, F::zero(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", t, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Valid (unpadded) 2-D convolution in NHWC layout.
    ///
    /// `x: [N, H, W, C]`, `w: [KH, KW, C, O]`, `b: [O]`; output `[N, OH, OW, O]` with
    /// `OH = (H - KH) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sx[1] < sw[0] || sx[2] < sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if self.shape(b) != [sw[3]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sw,
                rhs: self.shape(b).to_vec(),
            });
        }
        let geom = ConvGeom {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            kh: sw[0],
            kw: sw[1],
            out_c: sw[3],
            stride,
            oh: conv_out_size(sx[1], sw[0], stride),
            ow: conv_out_size(sx[2], sw[1], stride),
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, k, o) = (geom.rows(), geom.patch(), geom.out_c);
        let mut out = vec![F::zero(); rows * o];
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        matmul_into(rows, k, o, &cols, false, self.value(w).data(), false, F::one(), &mut out);
        let t = Tensor::new(&[geom.n, geom.oh, geom.ow, o], out)?;
        let rg = self.rg(&[x, w, b]);
        let cols = if rg { cols } else { Vec::new() };
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    // ---------------------------------------------------------- normalizing

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = F::from_f64(eps);
        let dd = F::from_f64(d as f64);
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d.max(1);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dd;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push("layer_norm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[idx(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", t, Op::Softmax { x, axis }, rg)
    }

    /// Divides each row (last axis) by its L2 norm, `sqrt(‖x‖² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        let xv = self.value(x);
        let rows = xv.numel() / d.max(1);
        let eps = F::from_f64(eps);
        let mut denom = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let n = (row.iter().map(|&v| v * v).sum::<F>() + eps).sqrt();
            denom[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push("l2_normalize", t, Op::L2Normalize { x, denom }, rg)
    }

    /// Inverted dropout: zeroes with probability `p` and rescales survivors by
    /// `1/(1-p)` in training; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push("dropout", t, Op::Dropout { x, mask }, rg)
    }

    // ------------------------------------------------------------ structure

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        self.push("concat", t, Op::Concat { inputs: inputs.to_vec(), axis }, rg)
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(&new_shape, out)?;
        let rg = self.rg(&[x]);
        self.push("slice", t, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.numel() / d.max(1);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} out of range ({rows} rows)")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[indices.len(), d], out)?;
        let rg = self.rg(&[x]);
        self.push("gather_rows", t, Op::GatherRows { x, indices: indices.to_vec() }, rg)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<F>() / F::from_f64(xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_squared_error", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() == 0 {
            return Err(invalid("mean_squared_error", "empty tensor"));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / F::from_f64(ta.numel() as f64);
        let rg = self.rg(&[a, b]);
        self.push("mean_squared_error", Tensor::scalar(s), Op::Mse(a, b), rg)
    }

    // ------------------------------------------------------------- attention

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv: [L, 3·D]` holds queries, keys and values side by side, with `D` split
    /// evenly across `heads`. `segments` lists disjoint `(start, len)` row ranges; each
    /// is an independent sequence where position `i` attends to positions `≤ i` of the
    /// same segment. Rows outside every segment produce zeros. Output is `[L, D]`.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 2 || heads == 0 || !shape[1].is_multiple_of(3 * heads) {
            return Err(invalid(
                "causal_attention",
                format!("qkv shape {shape:?} incompatible with {heads} heads"),
            ));
        }
        let l = shape[0];
        let d = shape[1] / 3;
        let dk = d / heads;
        for &(s, n) in segments {
            if s + n > l {
                return Err(invalid("causal_attention", format!("segment {s}+{n} exceeds {l} rows")));
            }
        }
        let scale = F::from_f64(1.0 / (dk as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![F::zero(); l * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in segments {
            for h in 0..heads {
                let mut p = vec![F::zero(); len * len];
                if len > 0 {
                    let q = &src[start * 3 * d + h * dk..];
                    let k = &src[start * 3 * d + d + h * dk..];
                    // SAFETY: strided views stay within `src`/`p` by construction.
                    unsafe {
                        F::gemm(
                            len, dk, len, scale,
                            q.as_ptr(), (3 * d) as isize, 1,
                            k.as_ptr(), 1, (3 * d) as isize,
                            F::zero(), p.as_mut_ptr(), len as isize, 1,
                        );
                    }
                    for i in 0..len {
                        let row = &mut p[i * len..(i + 1) * len];
                        let mx = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
                        let mut s = F::zero();
                        for x in row[..=i].iter_mut() {
                            *x = (*x - mx).exp();
                            s += *x;
                        }
                        for x in row[..=i].iter_mut() {
                            *x /= s;
                        }
                        for x in row[i + 1..].iter_mut() {
                            *x = F::zero();
                        }
                    }
                    let v = &src[start * 3 * d + 2 * d + h * dk..];
                    let o = &mut out[start * d + h * dk..];
                    // SAFETY: as above.
                    unsafe {
                        F::gemm(
                            len, len, dk, F::one(),
                            p.as_ptr(), len as isize, 1,
                            v.as_ptr(), (3 * d) as isize, 1,
                            F::zero(), o.as_mut_ptr(), d as isize, 1,
                        );
                    }
                }
                probs.push(p);
            }
        }
        let t = Tensor::new(&[l, d], out)?;
        let rg = self.rg(&[qkv]);
        let st = AttentionState {
            qkv,
            segments: segments.to_vec(),
            heads,
            probs,
        };
        self.push("causal_attention", t, Op::Attention(Box::new(st)), rg)
    }

    // -------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(ls.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    match self.leaf_grads.get_mut(&i) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            self.leaf_grads.insert(i, g);
                        }
                    }
                    continue;
                }
                Op::Param(id) => {
                    let slot = &mut self.param_grads[id.0];
                    match slot {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                    continue;
                }
                _ => {}
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        let shape = self.shape(v).to_vec();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = zip_t(g, self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = zip_t(g, self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, t);
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*b) {
                    let d = g.last_dim();
                    let mut gb = vec![F::zero(); d];
                    for row in g.data().chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[d], gb)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.buf(grads, *a);
                    // ga += g · bᵀ (or g · b when b is stored transposed)
                    matmul_into(m, n, k, g.data(), false, bv, !*trans_b, F::one(), ga.data_mut());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.buf(grads, *b);
                    if *trans_b {
                        matmul_into(n, m, k, g.data(), true, av, false, F::one(), gb.data_mut());
                    } else {
                        matmul_into(k, m, n, av, true, g.data(), false, F::one(), gb.data_mut());
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, k, o) = (geom.rows(), geom.patch(), geom.out_c);
                if self.wants(*w) {
                    let gw = self.buf(grads, *w);
                    matmul_into(k, rows, o, cols, true, g.data(), false, F::one(), gw.data_mut());
                }
                if self.wants(*b) {
                    let mut gb = vec![F::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[o], gb)?);
                }
                if self.wants(*x) {
                    let mut gcols = vec![F::zero(); rows * k];
                    matmul_into(rows, o, k, g.data(), false, self.value(*w).data(), true, F::zero(), &mut gcols);
                    let gx = self.buf(grads, *x);
                    col2im_add(&gcols, geom, gx.data_mut());
                }
            }
            Op::Relu(x) => {
                let t = zip_t(g, self.value(*x), |gv, xv| if xv > F::zero() { gv } else { F::zero() });
                self.acc(grads, *x, t);
            }
            Op::Gelu(x) => {
                let t = zip_t(g, self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.acc(grads, *x, t);
            }
            Op::Tanh(x) => {
                let t = zip_t(g, out, |gv, y| gv * (F::one() - y * y));
                self.acc(grads, *x, t);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.last_dim();
                let rows = g.numel() / d.max(1);
                let gm = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![F::zero(); d];
                    let mut gbt = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            gg[j] += gv * xhat[r * d + j];
                            gbt[j] += gv;
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(&[d], gg)?);
                    self.acc(grads, *beta, Tensor::new(&[d], gbt)?);
                }
                if self.wants(*x) {
                    let dd = F::from_f64(d as f64);
                    let mut gx = vec![F::zero(); g.numel()];
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let gh = g.data()[r * d + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let gh = g.data()[r * d + j] * gm[j];
                            gx[r * d + j] = rstd[r] / dd * (dd * gh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(g.shape(), gx)?);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: F = (0..len).map(|j| g.data()[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape(), gx)?);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.acc(grads, *x, Tensor::new(g.shape(), data)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.wants(v) {
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            part.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        self.acc(grads, v, Tensor::new(self.shape(v), part)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.wants(*x) {
                    return Ok(());
                }
                let xs = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&xs, *axis);
                let len = out.shape()[*axis];
                let gx = self.buf(grads, *x);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in gx.data_mut()[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => {
                let t = g.clone().reshaped(self.shape(*x))?;
                self.acc(grads, *x, t);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = F::from_f64(self.value(*x).numel() as f64);
                let gv = g.item() / n;
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = F::from_f64(2.0) * g.item() / F::from_f64(ta.numel() as f64);
                let diff = zip_t(ta, tb, |x, y| (x - y) * c);
                if self.wants(*b) {
                    self.acc(grads, *b, diff.map(|v| -v));
                }
                self.acc(grads, *a, diff);
            }
            Op::L2Normalize { x, denom } => {
                let d = g.last_dim();
                let xv = self.value(*x).data();
                let mut gx = vec![F::zero(); xv.len()];
                for (r, &n) in denom.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: F = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let n3 = n * n * n;
                    for j in 0..d {
                        gx[r * d + j] = gr[j] / n - xr[j] * dot / n3;
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), gx)?);
            }
            Op::GatherRows { x, indices } => {
                if !self.wants(*x) {
                    return Ok(());
                }
                let d = g.last_dim();
                let gx = self.buf(grads, *x);
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * d..(src + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
            Op::Attention(st) => {
                self.attention_backward(st, g, grads);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, st: &AttentionState<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        if !self.wants(st.qkv) {
            return;
        }
        let src = self.value(st.qkv).data();
        let d = src.len() / self.shape(st.qkv)[0].max(1) / 3;
        let dk = d / st.heads;
        let scale = F::from_f64(1.0 / (dk as f64).sqrt());
        let gq = self.buf(grads, st.qkv).data_mut();
        let gd = g.data();
        let mut pi = 0;
        for &(start, len) in &st.segments {
            for h in 0..st.heads {
                let p = &st.probs[pi];
                pi += 1;
                if len == 0 {
                    continue;
                }
                let q_off = start * 3 * d + h * dk;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let go = &gd[start * d + h * dk..];
                let mut dp = vec![F::zero(); len * len];
                // SAFETY: all views are in-bounds strided windows of the buffers.
                unsafe {
                    // dV += Pᵀ · dO
                    F::gemm(
                        len, len, dk, F::one(),
                        p.as_ptr(), 1, len as isize,
                        go.as_ptr(), d as isize, 1,
                        F::one(), gq.as_mut_ptr().add(v_off), (3 * d) as isize, 1,
                    );
                    // dP = dO · Vᵀ
                    F::gemm(
                        len, dk, len, F::one(),
                        go.as_ptr(), d as isize, 1,
                        src.as_ptr().add(v_off), 1, (3 * d) as isize,
                        F::zero(), dp.as_mut_ptr(), len as isize, 1,
                    );
                }
                for i in 0..len {
                    let row_p = &p[i * len..(i + 1) * len];
                    let row_d = &mut dp[i * len..(i + 1) * len];
                    let dot: F = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in row_d.iter_mut().zip(row_p) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // SAFETY: as above.
                unsafe {
                    // dQ += dS · K
                    F::gemm(
                        len, len, dk, F::one(),
                        dp.as_ptr(), len as isize, 1,
                        src.as_ptr().add(k_off), (3 * d) as isize, 1,
                        F::one(), gq.as_mut_ptr().add(q_off), (3 * d) as isize, 1,
                    );
                    // dK += dSᵀ · Q
                    F::gemm(
                        len, len, dk, F::one(),
                        dp.as_ptr(), 1, len as isize,
                        src.as_ptr().add(q_off), (3 * d) as isize, 1,
                        F::one(), gq.as_mut_ptr().add(k_off), (3 * d) as isize, 1,
                    );
                }
            }
        }
    }
}

/// Output spatial size of an unpadded convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_t<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * a * x * x)
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom) -> Vec<F> {
    let k = g.patch();
    let span = g.kw * g.c;
    let mut cols = vec![F::zero(); g.rows() * k];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let src = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                    dst[ky * span..(ky + 1) * span].copy_from_slice(&x[src..src + span]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<F: Scalar>(cols: &[F], g: &ConvGeom, gx: &mut [F]) {
    let k = g.patch();
    let span = g.kw * g.c;
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * k..(row + 1) * k];
                for ky in 0..g.kh {
                    let dst = ((n * g.h + oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                    for (d, &s) in gx[dst..dst + span].iter_mut().zip(&src[ky * span..(ky + 1) * span]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}
