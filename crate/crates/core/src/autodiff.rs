//! Reverse-mode differentiation over an eagerly built tape.
//!
//! A [`Graph`] records every operation as it executes. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates gradients into every ancestor that requires them. The graph is
//! built once per forward pass and dropped after the update.
//!
//! Shapes are strict: apart from the leading batch dimensions of
//! [`Graph::matmul`] and the explicit [`Graph::add_bias`], operands must agree
//! exactly.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Accumulation order for reductions that run along a batch axis.
///
/// `Canonical` sums terms in an order fixed by their values, which makes the
/// result independent of how the operands are permuted. It is slower and only
/// used where permutation equivariance must hold bit for bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SumOrder {
    #[default]
    Sequential,
    Canonical,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows(Var, Vec<usize>),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
        broadcast_b: bool,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    CosineSim {
        a: Var,
        b: Var,
        eps: T,
    },
    AddBias(Var, Var),
    TakeAlongLast(Var, Vec<usize>),
    MaskFill(Var, Vec<bool>),
    MulConst(Var, Vec<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows(..) => "gather_rows",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CosineSim { .. } => "cosine_sim",
            Op::AddBias(..) => "add_bias",
            Op::TakeAlongLast(..) => "take_along_last",
            Op::MaskFill(..) => "mask_fill",
            Op::MulConst(..) => "mul_const",
        }
    }
}

/// Names of every differentiable operation the graph records.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "relu",
    "gelu",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "concat",
    "reshape",
    "permute",
    "narrow",
    "gather_rows",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "cosine_sim",
    "add_bias",
    "take_along_last",
    "mask_fill",
    "mul_const",
];

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn total_cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.as_f64().total_cmp(&b.as_f64())
}

/// Integer key whose ordering matches `f64::total_cmp`.
fn order_key<T: Scalar>(v: T) -> i64 {
    let bits = v.as_f64().to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}

/// Sum in ascending order of value, so any permutation of `terms` gives the
/// same bits.
fn canonical_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by_key(|v| order_key(*v));
    terms.iter().fold(T::zero(), |acc, &v| acc + v)
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize, order: SumOrder) {
    match order {
        SumOrder::Sequential => {
            for i in 0..p {
                let row = &mut out[i * r..(i + 1) * r];
                for k in 0..q {
                    let aik = a[i * q + k];
                    let brow = &b[k * r..(k + 1) * r];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        SumOrder::Canonical => {
            // Order k by (a[i, k], row k of b). Equal keys give identical
            // terms, so the sum depends only on the multiset of pairs.
            let row_cmp = |x: usize, y: usize| {
                b[x * r..(x + 1) * r]
                    .iter()
                    .zip(&b[y * r..(y + 1) * r])
                    .map(|(u, v)| total_cmp(u, v))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            };
            let mut order: Vec<(i64, usize)> = Vec::with_capacity(q);
            for i in 0..p {
                let arow = &a[i * q..(i + 1) * q];
                order.clear();
                order.extend(arow.iter().enumerate().map(|(k, v)| (order_key(*v), k)));
                order.sort_unstable_by_key(|e| e.0);
                let mut start = 0;
                while start < q {
                    let end = start + order[start..].iter().take_while(|e| e.0 == order[start].0).count();
                    if end - start > 1 {
                        order[start..end].sort_unstable_by(|x, y| row_cmp(x.1, y.1));
                    }
                    start = end;
                }
                let row = &mut out[i * r..(i + 1) * r];
                let mut acc = vec![T::zero(); r];
                for &(_, k) in &order {
                    let aik = arow[k];
                    for (s, &bv) in acc.iter_mut().zip(&b[k * r..(k + 1) * r]) {
                        *s += aik * bv;
                    }
                }
                for (o, s) in row.iter_mut().zip(acc) {
                    *o += s;
                }
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// A graph whose backward rule for `op` is deliberately wrong. Used as a
    /// negative control for the gradient checker.
    pub fn with_fault(op: impl Into<String>) -> Self {
        Self {
            fault: Some(op.into()),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced inconsistent tensor");
        self.push(value, op, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` cut off from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if it requires one and a backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| f(a)).collect();
        let shape = v.shape().to_vec();
        self.out(shape, data, op, &[x])
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |a| a.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |a| a.ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| if a > T::zero() { a } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |a| gelu(a).0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.out(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::of(v.numel() as f64);
        let s = v.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        self.out(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        if mean {
            let n = T::of(len as f64);
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.out(out_shape, out, op, &[x]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat", "no operands"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.out(shape, out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.out(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.out(out_shape, data, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(Error::invalid("transpose", format!("axes ({a}, {b}) for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.out(out_shape, out, Op::Narrow { x, axis, start, len }, &[x]))
    }

    /// Selects rows along axis 0; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || rows.is_empty() {
            return Err(Error::invalid(
                "gather_rows",
                "needs a non-scalar input and at least one row",
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&d[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.out(out_shape, out, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, SumOrder::Sequential)
    }

    /// Matrix product over the last two axes. Leading axes must match, or `b`
    /// may be a plain matrix shared by every batch element of `a`.
    pub fn matmul_with(&mut self, a: Var, b: Var, order: SumOrder) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let broadcast_b = lead_b.is_empty() && !lead_a.is_empty();
        if q != q2 || (!broadcast_b && lead_a != lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * p * r];
        for n in 0..batch {
            let bslice = if broadcast_b {
                bd
            } else {
                &bd[n * q * r..(n + 1) * q * r]
            };
            matmul_kernel(
                &ad[n * p * q..(n + 1) * p * q],
                bslice,
                &mut out[n * p * r..(n + 1) * p * r],
                p,
                q,
                r,
                order,
            );
        }
        let mut shape = lead_a.to_vec();
        shape.extend([p, r]);
        Ok(self.out(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                broadcast_b,
            },
            &[a, b],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_with(x, axis, SumOrder::Sequential)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax_with(&mut self, x: Var, axis: usize, order: SumOrder) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                for k in 0..len {
                    lane[k] = (d[at(k)] - max).exp();
                }
                let total = match order {
                    SumOrder::Sequential => lane.iter().fold(T::zero(), |acc, &v| acc + v),
                    SumOrder::Canonical => canonical_sum(&mut lane.clone()),
                };
                for k in 0..len {
                    out[at(k)] = lane[k] / total;
                }
            }
        }
        Ok(self.out(shape, out, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| d[at(k)]).fold(T::neg_infinity(), T::max);
                let total = (0..len).fold(T::zero(), |acc, k| acc + (d[at(k)] - max).exp());
                let lse = max + total.ln();
                for k in 0..len {
                    out[at(k)] = d[at(k)] - lse;
                }
            }
        }
        Ok(self.out(shape, out, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`. A constant row maps to `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::of(eps);
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let n = T::of(d as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        Ok(self.out(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each vector along the last axis to unit length; the norm is
    /// floored at `eps`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("l2_normalize", "scalar input"))?;
        let eps = T::of(eps);
        let xd = self.value(x).data();
        let rows = xd.len() / d;
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps);
            norms[r] = n;
            for j in 0..d {
                out[r * d + j] = row[j] / n;
            }
        }
        Ok(self.out(shape, out, Op::L2Normalize { x, eps, norms }, &[x]))
    }

    /// Cosine similarity along the last axis, denominator floored at `eps`.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_sim", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::invalid("cosine_sim", "scalar input"))?;
        let eps = T::of(eps);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let rows = ad.len() / d;
        let out = (0..rows)
            .map(|r| {
                let (x, y) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                let (dot, nx, ny) = cos_parts(x, y);
                dot / (nx * ny).max(eps)
            })
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.out(out_shape, out, Op::CosineSim { a, b, eps }, &[a, b]))
    }

    /// `x[..., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("add_bias", "scalar input"))?;
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", &shape, self.shape(bias)));
        }
        let bd = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        Ok(self.out(shape, out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `out[r] = x[r, index[r]]` where `r` runs over all leading positions.
    pub fn take_along_last(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("take_along_last", "scalar input"))?;
        let rows = self.value(x).numel() / n;
        if index.len() != rows {
            return Err(Error::invalid(
                "take_along_last",
                format!("{} indices for {rows} rows of {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "take_along_last",
                format!("index {bad} out of range for {n}"),
            ));
        }
        let d = self.value(x).data();
        let out = index.iter().enumerate().map(|(r, &i)| d[r * n + i]).collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.out(out_shape, out, Op::TakeAlongLast(x, index.to_vec()), &[x]))
    }

    /// Replaces masked entries with `value`; they receive no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::invalid(
                "mask_fill",
                format!("mask of {} for {} values", mask.len(), self.value(x).numel()),
            ));
        }
        let fill = T::of(value);
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.out(shape, out, Op::MaskFill(x, mask.to_vec()), &[x]))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(x).numel() {
            return Err(Error::invalid(
                "mul_const",
                format!("{} factors for {} values", factors.len(), self.value(x).numel()),
            ));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.out(shape, out, Op::MulConst(x, factors), &[x]))
    }

    /// Replays the tape backwards from the scalar `loss`. Gradients add onto
    /// whatever earlier passes accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        pass[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(mut gout) = pass[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(fault) = &self.fault {
                if fault == node.op.name() {
                    gout.iter_mut().for_each(|g| *g *= T::of(1.25));
                }
            }
            self.propagate(idx, &gout, &mut pass);
            let slot = &mut self.grads[idx];
            match slot {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &g)| *a += g),
                None => *slot = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = pass[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(g, &o)| *g -= o));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, &o)| *g += o * *c)),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i];
                    }
                })
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] / xv[i];
                    }
                })
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu(xv[i]).1;
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0])),
            Op::Mean(x) => {
                let n = T::of(self.nodes[x.0].value.numel() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0] / n))
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(shp(*x), *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                g[(o * len + k) * inner + i] += gout[o * inner + i] * scale;
                            }
                        }
                    }
                })
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = shp(x)[*axis];
                    acc(x, &mut |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut g[o * len * inner..(o + 1) * len * inner],
                                &gout[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gout, node.value.shape(), &inverse);
                acc(*x, &mut |g| add_into(g, &back));
            }
            Op::Narrow { x, axis, start, len } => {
                let (outer, full, inner) = split_axis(shp(*x), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        add_into(
                            &mut g[to..to + len * inner],
                            &gout[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                })
            }
            Op::GatherRows(x, rows) => {
                let inner: usize = shp(*x)[1..].iter().product();
                acc(*x, &mut |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * inner..(r + 1) * inner], &gout[k * inner..(k + 1) * inner]);
                    }
                })
            }
            Op::MatMul {
                a,
                b,
                batch,
                p,
                q,
                r,
                broadcast_b,
            } => {
                let (p, q, r) = (*p, *q, *r);
                let (av, bv) = (val(*a), val(*b));
                // dA = dC · Bᵀ
                acc(*a, &mut |g| {
                    for n in 0..*batch {
                        let bs = if *broadcast_b { 0 } else { n * q * r };
                        for i in 0..p {
                            let grow = &gout[n * p * r + i * r..n * p * r + (i + 1) * r];
                            let gi = &mut g[n * p * q + i * q..n * p * q + (i + 1) * q];
                            for (k, gk) in gi.iter_mut().enumerate() {
                                let brow = &bv[bs + k * r..bs + (k + 1) * r];
                                *gk += grow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                            }
                        }
                    }
                });
                // dB = Aᵀ · dC, summed over the batch when B is shared
                acc(*b, &mut |g| {
                    for n in 0..*batch {
                        let bs = if *broadcast_b { 0 } else { n * q * r };
                        for i in 0..p {
                            for k in 0..q {
                                let aik = av[n * p * q + i * q + k];
                                let grow = &gout[n * p * r + i * r..n * p * r + (i + 1) * r];
                                for (gb, &go) in g[bs + k * r..bs + (k + 1) * r].iter_mut().zip(grow) {
                                    *gb += aik * go;
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, k| s + gout[at(k)] * y[at(k)]);
                            for k in 0..len {
                                g[at(k)] += y[at(k)] * (gout[at(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let total = (0..len).fold(T::zero(), |s, k| s + gout[at(k)]);
                            for k in 0..len {
                                g[at(k)] += gout[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = shp(*gamma)[0];
                let rows = inv_std.len();
                let gv = val(*gamma);
                let n = T::of(d as f64);
                acc(*x, &mut |g| {
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gout[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..d {
                            let dh = gout[r * d + j] * gv[j];
                            g[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::L2Normalize { x, eps, norms } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for (r, &n) in norms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        if n > *eps {
                            let dot = row.clone().fold(T::zero(), |s, i| s + y[i] * gout[i]);
                            for i in row {
                                g[i] += (gout[i] - y[i] * dot) / n;
                            }
                        } else {
                            for i in row {
                                g[i] += gout[i] / *eps;
                            }
                        }
                    }
                })
            }
            Op::CosineSim { a, b, eps } => {
                let d = *shp(*a).last().unwrap();
                let (av, bv) = (val(*a), val(*b));
                let grad_wrt = |g: &mut [T], x: &[T], y: &[T]| {
                    for r in 0..gout.len() {
                        let (xr, yr) = (&x[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        let (dot, nx, ny) = cos_parts(xr, yr);
                        let denom = nx * ny;
                        if denom > *eps {
                            let s = dot / denom;
                            for j in 0..d {
                                g[r * d + j] += gout[r] * (yr[j] / denom - s * xr[j] / (nx * nx));
                            }
                        } else {
                            for j in 0..d {
                                g[r * d + j] += gout[r] * yr[j] / *eps;
                            }
                        }
                    }
                };
                acc(*a, &mut |g| grad_wrt(g, av, bv));
                acc(*b, &mut |g| grad_wrt(g, bv, av));
            }
            Op::AddBias(x, bias) => {
                let d = shp(*bias)[0];
                acc(*x, &mut |g| add_into(g, gout));
                acc(*bias, &mut |g| {
                    for (i, &o) in gout.iter().enumerate() {
                        g[i % d] += o;
                    }
                });
            }
            Op::TakeAlongLast(x, index) => {
                let n = *shp(*x).last().unwrap();
                acc(*x, &mut |g| {
                    for (r, &i) in index.iter().enumerate() {
                        g[r * n + i] += gout[r];
                    }
                })
            }
            Op::MaskFill(x, mask) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    if !mask[i] {
                        g[i] += gout[i];
                    }
                }
            }),
            Op::MulConst(x, factors) => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * factors[i];
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn cos_parts<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);

        let z = g.constant(Tensor::zeros([2, 3]));
        let any = g.constant(Tensor::from_fn([3, 4], |i| i as f64 - 5.0));
        let zz = g.matmul(z, any).unwrap();
        assert_eq!(g.shape(zz), &[2, 4]);
        assert!(g.value(zz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros([2, 3, 4]));
        let d = g.constant(Tensor::zeros([3, 4, 2]));
        assert!(g.matmul(c, d).is_err());
    }

    #[test]
    fn canonical_matmul_matches_sequential_on_integers() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn([2, 3, 5], |i| (i % 7) as f32));
        let b = g.constant(Tensor::from_fn([5, 4], |i| (i % 3) as f32 - 1.0));
        let s = g.matmul(a, b).unwrap();
        let c = g.matmul_with(a, b, SumOrder::Canonical).unwrap();
        assert_eq!(g.value(s), g.value(c));
    }

    #[test]
    fn order_key_matches_total_cmp() {
        let vals = [
            f32::NEG_INFINITY,
            -3.5,
            -1e-30,
            -0.0,
            0.0,
            1e-30,
            2.0,
            f32::INFINITY,
            f32::NAN,
            -f32::NAN,
        ];
        for &x in &vals {
            for &y in &vals {
                assert_eq!(order_key(x).cmp(&order_key(y)), x.total_cmp(&y), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn canonical_matmul_is_row_permutation_invariant_with_ties() {
        // repeated coefficients force the tie-break on rows of b
        let a = t(&[1, 6], &[0.5, 0.25, 0.5, 1e-8, 0.25, 0.5]);
        let b = t(
            &[6, 2],
            &[1e8, 1.0, -1e8, 3.0, 7.0, 1e-3, 5.0, 5.0, 1.0, -2.0, 1.0, 1e7],
        );
        let base = {
            let mut g = Graph::<f64>::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = g.matmul_with(x, y, SumOrder::Canonical).unwrap();
            g.value(c).clone()
        };
        for perm in [[5, 4, 3, 2, 1, 0], [2, 0, 5, 1, 3, 4], [1, 3, 5, 0, 2, 4]] {
            let pa = Tensor::from_fn([1, 6], |k| a.data()[perm[k]]);
            let pb = Tensor::from_fn([6, 2], |i| b.data()[perm[i / 2] * 2 + i % 2]);
            let mut g = Graph::<f64>::new();
            let (x, y) = (g.constant(pa), g.constant(pb));
            let c = g.matmul_with(x, y, SumOrder::Canonical).unwrap();
            assert_eq!(g.value(c), &base);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[1. / 3.; 3], 1e-12));

        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|v| v.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);

        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[0.0900, 0.2447, 0.6652], 1e-3));

        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 2], |i| i as f64 * 0.3));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| v.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones([2]));
        let zeros = g.constant(Tensor::zeros([2]));
        let c = g.constant(t(&[2], &[7., 7.]));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);

        let x = g.constant(t(&[2], &[1., 3.]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(close(g.value(y).data(), &[-1., 1.], 1e-4));

        let five = g.constant(t(&[2], &[5., 5.]));
        let y = g.layer_norm(x, zeros, five, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[5., 5.]);

        let three = g.constant(Tensor::ones([3]));
        assert!(g.layer_norm(x, three, zeros, 1e-5).is_err());
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[0.3, -2.0]));
        let s = g.cosine_sim(a, a, 1e-8).unwrap();
        assert!((g.scalar_value(s) - 1.0).abs() < 1e-12);
        let x = g.constant(t(&[2], &[1., 0.]));
        let y = g.constant(t(&[2], &[0., 1.]));
        let s = g.cosine_sim(x, y, 1e-8).unwrap();
        assert_eq!(g.scalar_value(s), 0.0);
        let p = g.constant(t(&[2], &[1., 1.]));
        let q = g.constant(t(&[2], &[-1., -1.]));
        let s = g.cosine_sim(p, q, 1e-8).unwrap();
        assert!((g.scalar_value(s) + 1.0).abs() < 1e-12);
        let z = g.constant(Tensor::zeros([2]));
        let s = g.cosine_sim(z, p, 1e-8).unwrap();
        assert_eq!(g.scalar_value(s), 0.0);
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1., 2.]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0., 2.]);
        let x = g.constant(t(&[3], &[2., 4., 6.]));
        let m = g.mean(x);
        assert_eq!(g.scalar_value(m), 4.0);
        let xs: Vec<f64> = (0..13).map(|i| -3.0 + 0.5 * i as f64).collect();
        let x = g.constant(t(&[13], &xs));
        let e = g.exp(x);
        let l = g.log(e);
        assert!(close(g.value(l).data(), &xs, 1e-12));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let e = g.exp(x);
        let s = g.sum(e);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        let expected: Vec<f64> = [1f64, 2.].iter().map(|v| 2.0 * v.exp()).collect();
        assert!(close(g.grad(x).unwrap().data(), &expected, 1e-12));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn fan_out_sums_contributions() {
        // f = sum(x*x) + sum(3x)  =>  df/dx = 2x + 3
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1., -2., 0.5]));
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq);
        let tx = g.scale(x, 3.0);
        let b = g.sum(tx);
        let f = g.add(a, b).unwrap();
        g.backward(f).unwrap();
        assert!(close(g.grad(x).unwrap().data(), &[5., -1., 4.], 1e-12));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1., 2.]));
        let x = g.param(t(&[2], &[3., 4.]));
        let p = g.mul(c, x).unwrap();
        let d = g.detach(p);
        let q = g.mul(p, d).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
        // d(s)/dx = c * d = c * (c*x)
        assert_eq!(g.grad(x).unwrap().data(), &[3., 16.]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_concat_gather() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let a = g.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(g.value(a).data(), &[1., 2., 4., 5.]);
        let c = g.concat(&[x, a], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.value(c).data(), &[0., 1., 2., 1., 2., 3., 4., 5., 4., 5.]);
        let r = g.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(r).data(), &[3., 4., 5., 3., 4., 5., 0., 1., 2.]);
        assert!(g.gather_rows(x, &[2]).is_err());
        assert!(g.narrow(x, 1, 2, 2).is_err());
        assert!(g.concat(&[x, r], 1).is_err());
    }
}
