//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its forward value and enough
//! information to run its local backward rule. Nodes are only ever appended,
//! so node order is a topological order and `backward` is a single reverse
//! sweep. A tape is rebuilt for every forward pass.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward pass is computed outside the
/// tape. Returns one gradient per input, `None` meaning zero.
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    TransposeLast2(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Pick { x: Var, index: Vec<usize> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::TransposeLast2(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::Pick { .. } => "pick",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, false)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push_unchecked(t, Op::Leaf, requires_grad))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, data, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op.name(), ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(shape, data, op, &[a, b])
    }

    /// `[.., k] x [k, n] -> [.., n]`; leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        if ta.shape().len() == 1 {
            shape = vec![n];
        }
        self.push(shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", ta, tb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", ta, tb));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ab = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_bt_acc(ab, bb, cb, m, k, n);
            } else {
                gemm_acc(ab, bb, cb, m, k, n);
            }
        }
        self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                transpose_b,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` vector to every row of `a` (`a` has trailing dim `n`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_op(a, bias, Op::AddRow(a, bias), "add_row", |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, scale: Var) -> Result<Var> {
        self.row_op(a, scale, Op::MulRow(a, scale), "mul_row", |x, y| x * y)
    }

    fn row_op(
        &mut self,
        a: Var,
        r: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(r));
        let n = ta.last_dim();
        if tr.numel() != n {
            return Err(mismatch(name, ta, tr));
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tr.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(shape, data, op, &[a, r])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Softmax over the trailing dimension, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = softmax_rows(t.data(), t.last_dim());
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.last_dim();
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(cols).zip(data.chunks_mut(cols)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::LogSoftmax(a), &[a])
    }

    /// LayerNorm over the trailing dimension without the affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(
                "layer_norm: eps must be positive".into(),
            ));
        }
        let t = self.value(a);
        let cols = t.last_dim();
        let mut data = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(t.rows());
        for (src, dst) in t.data().chunks(cols).zip(data.chunks_mut(cols)) {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            inv_std.push(r);
        }
        let shape = t.shape().to_vec();
        self.push(shape, data, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat: no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.value(*first), self.value(*p)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let mid = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("cannot take {len} from {start} along axis {axis}"),
            });
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, data, Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Swaps the two trailing dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "needs at least two dimensions".into(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.numel() / (r * c);
        let mut data = vec![0.0; t.numel()];
        for b in 0..batch {
            let src = &t.data()[b * r * c..(b + 1) * r * c];
            let dst = &mut data[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        self.push(shape, data, Op::TransposeLast2(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(vec![1], vec![total], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(vec![1], vec![m], Op::Mean(a), &[a])
    }

    /// Sums over the trailing dimension, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = t.data().chunks(t.last_dim()).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(shape, data, Op::SumLast(a), &[a])
    }

    /// Selects one entry per row: `out[r] = a[r, index[r]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.last_dim();
        if index.len() != t.rows() || index.iter().any(|&i| i >= cols) {
            return Err(TensorError::InvalidArgument(format!(
                "pick: {} indices for {} rows of width {cols}",
                index.len(),
                t.rows()
            )));
        }
        let data: Vec<f64> = index.iter().enumerate().map(|(r, &i)| t.row(r)[i]).collect();
        let shape = vec![data.len()];
        self.push(
            shape,
            data,
            Op::Pick {
                x: a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Records an externally computed forward value with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        let name = rule.name();
        if !output.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let (shape, data) = (output.shape().to_vec(), output.into_data());
        self.push(
            shape,
            data,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &node.value;

        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.last_dim(), tb.shape()[1]);
                if wants(*a) {
                    gemm_bt_acc(g, tb.data(), acc!(*a), m, n, k);
                }
                if wants(*b) {
                    gemm_at_acc(ta.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if wants(*a) {
                    let ga = acc!(*a);
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &tb.data()[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_b {
                            // dA = G B, B stored [n, k]
                            gemm_acc(gb, bb, dst, m, n, k);
                        } else {
                            gemm_bt_acc(gb, bb, dst, m, n, k);
                        }
                    }
                }
                if wants(*b) {
                    let gbv = acc!(*b);
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &ta.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gbv[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB[n,k] = G^T A
                            gemm_at_acc(gb, ab, dst, m, n, k);
                        } else {
                            gemm_at_acc(ab, gb, dst, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        axpy(acc!(v), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        axpy(acc!(v), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    for ((d, &gv), &o) in acc!(*a).iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    for ((d, &gv), &o) in acc!(*b).iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if wants(*a) {
                    axpy(acc!(*a), g, 1.0);
                }
                if wants(*r) {
                    let cols = val(*r).numel();
                    let gr = acc!(*r);
                    for row in g.chunks(cols) {
                        axpy(gr, row, 1.0);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (val(*a), val(*r));
                let cols = tr.numel();
                if wants(*a) {
                    let ga = acc!(*a);
                    for (dst, grow) in ga.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((d, &gv), &s) in dst.iter_mut().zip(grow).zip(tr.data()) {
                            *d += gv * s;
                        }
                    }
                }
                if wants(*r) {
                    let gr = acc!(*r);
                    for (arow, grow) in ta.data().chunks(cols).zip(g.chunks(cols)) {
                        for ((d, &gv), &x) in gr.iter_mut().zip(grow).zip(arow) {
                            *d += gv * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => axpy(acc!(*a), g, *c),
            Op::AddScalar(a) | Op::Reshape(a) => axpy(acc!(*a), g, 1.0),
            Op::Relu(a) => {
                let x = val(*a).data();
                for ((d, &gv), &xv) in acc!(*a).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &y) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Exp(a) => {
                for ((d, &gv), &y) in acc!(*a).iter_mut().zip(g).zip(out.data()) {
                    *d += gv * y;
                }
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                for ((d, &gv), &xv) in acc!(*a).iter_mut().zip(g).zip(x) {
                    *d += gv / xv;
                }
            }
            Op::Square(a) => {
                let x = val(*a).data();
                for ((d, &gv), &xv) in acc!(*a).iter_mut().zip(g).zip(x) {
                    *d += 2.0 * xv * gv;
                }
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                for ((d, &gv), &xv) in acc!(*a).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    } else if xv < 0.0 {
                        *d -= gv;
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = out.last_dim();
                let ga = acc!(*a);
                for ((dst, grow), yrow) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = out.last_dim();
                let ga = acc!(*a);
                for ((dst, grow), yrow) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = grow.iter().sum();
                    for ((d, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - y.exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = out.last_dim();
                let nf = cols as f64;
                let gx = acc!(*x);
                for (((dst, grow), yrow), &r) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                    .zip(inv_std)
                {
                    let gmean = grow.iter().sum::<f64>() / nf;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((d, &gv), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d += r * (gv - gmean - y * gy);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let mid = val(*p).shape()[*axis];
                    if wants(*p) {
                        let gp = acc!(*p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + mid) * inner];
                            axpy(&mut gp[o * mid * inner..(o + 1) * mid * inner], src, 1.0);
                        }
                    }
                    offset += mid;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, mid, inner) = split_axis(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                let gx = acc!(*x);
                for o in 0..outer {
                    let base = o * mid * inner + start * inner;
                    axpy(
                        &mut gx[base..base + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                        1.0,
                    );
                }
            }
            Op::TransposeLast2(a) => {
                let s = out.shape();
                // output is [.., c, r] where input was [.., r, c]
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = out.numel() / (r * c);
                let ga = acc!(*a);
                for b in 0..batch {
                    let src = &g[b * r * c..(b + 1) * r * c];
                    let dst = &mut ga[b * r * c..(b + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += src[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc!(*a).iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean(a) => {
                let gv = g[0] / val(*a).numel() as f64;
                acc!(*a).iter_mut().for_each(|d| *d += gv);
            }
            Op::SumLast(a) => {
                let cols = val(*a).last_dim();
                for (dst, &gv) in acc!(*a).chunks_mut(cols).zip(g) {
                    dst.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Pick { x, index } => {
                let cols = val(*x).last_dim();
                let gx = acc!(*x);
                for (r, (&i, &gv)) in index.iter().zip(g).enumerate() {
                    gx[r * cols + i] += gv;
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let local = rule.backward(&ins, out, g);
                if local.len() != inputs.len() {
                    return Err(TensorError::InvalidArgument(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        rule.name(),
                        local.len(),
                        inputs.len()
                    )));
                }
                for (v, lg) in inputs.iter().zip(local) {
                    if let (true, Some(lg)) = (wants(*v), lg) {
                        axpy(acc!(*v), &lg, 1.0);
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
