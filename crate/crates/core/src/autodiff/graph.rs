//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its
//! vector-Jacobian product; [`Graph::backward`] then walks the list once in
//! reverse. Node indices are assigned in creation order, so reverse index
//! order is a valid reverse topological order.
//!
//! Non-differentiable decisions (ReLU activity, hard threshold gates, the sign
//! used by `abs`) are folded into a running [`Graph::signature`]. Two
//! evaluations with equal signatures took the same branch everywhere, which is
//! what the finite-difference checker uses to discard kink-crossing probes.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, numel, strides, Tensor};
use crate::error::{CoraError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMulShared(Var, Var),
    MatMulBatched(Var, Var),
    TransposeLast2(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    SumAxis(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Abs(Var),
    Powi(Var, u32),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MaskMul(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    signature: u64,
    backward_done: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not participate in the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(CoraError::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape` (zero on broadcast axes).
fn bcast_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 && out_shape[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visit every output position with the matching offsets into two inputs.
fn for_each_bcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Reduce a gradient of `shape_from` down to the broadcast source `shape_to`.
fn sum_to_shape(g: &Tensor, shape_to: &[usize]) -> Tensor {
    if g.shape() == shape_to {
        return g.clone();
    }
    let st = bcast_strides(g.shape(), shape_to);
    let zero = vec![0; g.ndim()];
    let mut out = vec![0.0; numel(shape_to)];
    let gd = g.data();
    for_each_bcast(g.shape(), &st, &zero, |o, ot, _| out[ot] += gd[o]);
    Tensor::new(shape_to.to_vec(), out).expect("sum_to_shape")
}

/// (outer, axis length, inner) split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn hash_bit(sig: &mut u64, bit: bool) {
    *sig = (*sig ^ (bit as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(CoraError::NonFinite { op: op_name });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(inner.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hash of every branch decision taken so far.
    pub fn signature(&self) -> u64 {
        self.inner.borrow().signature
    }

    fn record_bits(&self, bits: impl Iterator<Item = bool>) {
        let mut inner = self.inner.borrow_mut();
        let mut sig = inner.signature;
        for b in bits {
            hash_bit(&mut sig, b);
        }
        inner.signature = sig;
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            } else {
                let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
                let sa = bcast_strides(&out_shape, ta.shape());
                let sb = bcast_strides(&out_shape, tb.shape());
                let mut data = vec![0.0; numel(&out_shape)];
                let (da, db) = (ta.data(), tb.data());
                for_each_bcast(&out_shape, &sa, &sb, |o, oa, ob| data[o] = f(da[oa], db[ob]));
                Tensor::new(out_shape, data)?
            }
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::Offset(a))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        {
            let v = self.value(a);
            let bits: Vec<bool> = v.data().iter().map(|&x| x > 0.0).collect();
            drop(v);
            self.record_bits(bits.into_iter());
        }
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        {
            let bits: Vec<bool> = self.value(a).data().iter().map(|&x| x >= 0.0).collect();
            self.record_bits(bits.into_iter());
        }
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Element-wise integer power (`x ⊙ x ⊙ ... ⊙ x`, `p` times); `p = 0` gives ones.
    pub fn powi(&self, a: Var, p: u32) -> Result<Var> {
        self.unary("powi", a, |x| x.powi(p as i32), Op::Powi(a, p))
    }

    /// Multiply by a fixed 0/1 (or any constant) mask; the mask gets no gradient.
    pub fn mask_mul(&self, a: Var, mask: Tensor) -> Result<Var> {
        let value = {
            let v = self.value(a);
            if v.shape() != mask.shape() {
                return Err(CoraError::shape(
                    "mask_mul",
                    format!("{:?} vs mask {:?}", v.shape(), mask.shape()),
                ));
            }
            let data = v.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
            Tensor::new(v.shape().to_vec(), data)?
        };
        self.record_bits(mask.data().iter().map(|&m| m != 0.0));
        let rg = self.rg(a);
        self.push("mask_mul", value, Op::MaskMul(a, mask), rg)
    }

    /// Hard threshold gate: keeps entries where `keep(x)` holds, zeroes the rest.
    /// Kept entries pass gradient 1, dropped entries 0.
    pub fn hard_gate(&self, a: Var, keep: impl Fn(f64) -> bool) -> Result<Var> {
        let mask = self.value(a).map(|x| if keep(x) { 1.0 } else { 0.0 });
        self.mask_mul(a, mask)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` may be 2-D (shared across all leading axes of `a`) or have exactly
    /// the same leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, shared) = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.nodes[a.0].value, &inner.nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.is_empty() || sb.len() < 2 {
                return Err(CoraError::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
            let k = sa[sa.len() - 1];
            if sb.len() == 2 {
                if sb[0] != k {
                    return Err(CoraError::shape("matmul", format!("{sa:?} x {sb:?}")));
                }
                let n = sb[1];
                let rows = ta.numel() / k.max(1);
                let mut out = vec![0.0; rows * n];
                gemm(rows, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
                let mut shape = sa.to_vec();
                *shape.last_mut().unwrap() = n;
                (Tensor::new(shape, out)?, true)
            } else {
                let nd = sa.len();
                if nd != sb.len() || sa[..nd - 2] != sb[..nd - 2] || sb[nd - 2] != k {
                    return Err(CoraError::shape("matmul", format!("{sa:?} x {sb:?}")));
                }
                let (m, n) = (sa[nd - 2], sb[nd - 1]);
                let batch: usize = sa[..nd - 2].iter().product();
                let mut out = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        false,
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        0.0,
                    );
                }
                let mut shape = sa.to_vec();
                shape[nd - 1] = n;
                (Tensor::new(shape, out)?, false)
            }
        };
        let rg = self.rg(a) || self.rg(b);
        let op = if shared {
            Op::MatMulShared(a, b)
        } else {
            Op::MatMulBatched(a, b)
        };
        self.push("matmul", value, op, rg)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        if self.value(a).ndim() < 2 {
            return Err(CoraError::shape("transpose", "needs at least 2 axes"));
        }
        let value = self.value(a).transpose_last2();
        let rg = self.rg(a);
        self.push("transpose", value, Op::TransposeLast2(a), rg)
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        {
            let nd = self.value(a).ndim();
            let mut seen = vec![false; nd];
            if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
                return Err(CoraError::shape("permute", format!("bad permutation {perm:?}")));
            }
        }
        let value = self.value(a).permute(perm);
        let rg = self.rg(a);
        self.push("permute", value, Op::Permute(a, perm.to_vec()), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Broadcast-expand to `shape`.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let v = self.value(a);
            let out = broadcast_shape("expand", v.shape(), shape)?;
            if out != shape {
                return Err(CoraError::shape("expand", format!("{:?} -> {shape:?}", v.shape())));
            }
            let sa = bcast_strides(shape, v.shape());
            let zero = vec![0; shape.len()];
            let mut data = vec![0.0; numel(shape)];
            let d = v.data();
            for_each_bcast(shape, &sa, &zero, |o, oa, _| data[o] = d[oa]);
            Tensor::new(shape.to_vec(), data)?
        };
        let rg = self.rg(a);
        self.push("expand", value, Op::Expand(a), rg)
    }

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<()> {
        let nd = self.value(a).ndim();
        if axis >= nd {
            return Err(CoraError::shape(name, format!("axis {axis} out of range for {nd} axes")));
        }
        Ok(())
    }

    fn reduce_axis(&self, a: Var, axis: usize, scale: f64) -> Tensor {
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= scale);
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Tensor::new(shape, out).expect("reduce")
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let value = self.reduce_axis(a, axis, 1.0);
        let rg = self.rg(a);
        self.push("sum_axis", value, Op::SumAxis(a), rg)
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let len = self.value(a).shape()[axis];
        let value = self.reduce_axis(a, axis, 1.0 / len as f64);
        let rg = self.rg(a);
        self.push("mean_axis", value, Op::MeanAxis(a, axis), rg)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", value, Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let value = {
            let v = self.value(a);
            Tensor::scalar(v.sum() / v.numel() as f64)
        };
        let rg = self.rg(a);
        self.push("mean", value, Op::MeanAll(a), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let value = {
            let v = self.value(a);
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let d = v.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mx = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for l in 0..len {
                        let e = (d[at(l)] - mx).exp();
                        out[at(l)] = e;
                        z += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= z;
                    }
                }
            }
            Tensor::new(v.shape().to_vec(), out)?
        };
        let rg = self.rg(a);
        self.push("softmax", value, Op::Softmax(a, axis), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, xhat, rstd) = {
            let inner = self.inner.borrow();
            let tx = &inner.nodes[x.0].value;
            let (tg, tb) = (&inner.nodes[gamma.0].value, &inner.nodes[beta.0].value);
            let d = *tx.shape().last().ok_or_else(|| CoraError::shape("layer_norm", "scalar input"))?;
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(CoraError::shape(
                    "layer_norm",
                    format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
                ));
            }
            let rows = tx.numel() / d;
            let mut xhat = vec![0.0; tx.numel()];
            let mut out = vec![0.0; tx.numel()];
            let mut rstd = vec![0.0; rows];
            let (g, b) = (tg.data(), tb.data());
            for r in 0..rows {
                let row = &tx.data()[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mu) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
            let shape = tx.shape().to_vec();
            (Tensor::new(shape.clone(), out)?, Tensor::new(shape, xhat)?, rstd)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let inner = self.inner.borrow();
            let first = xs.first().ok_or_else(|| CoraError::shape("concat", "no inputs"))?;
            let base = inner.nodes[first.0].value.shape().to_vec();
            if axis >= base.len() {
                return Err(CoraError::shape("concat", "axis out of range"));
            }
            let mut total = 0;
            for v in xs {
                let s = inner.nodes[v.0].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(CoraError::shape("concat", format!("{base:?} vs {s:?}")));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner_len) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in xs {
                    let t = &inner.nodes[v.0].value;
                    let blk = t.shape()[axis] * inner_len;
                    out.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
                }
            }
            Tensor::new(shape, out)?
        };
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push("concat", value, Op::Concat(xs.to_vec(), axis), rg)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let value = {
            let v = self.value(x);
            if axis >= v.ndim() || start >= end || end > v.shape()[axis] {
                return Err(CoraError::shape(
                    "slice",
                    format!("{start}..{end} on axis {axis} of {:?}", v.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                out.extend_from_slice(&v.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = end - start;
            Tensor::new(shape, out)?
        };
        let rg = self.rg(x);
        self.push("slice", value, Op::Slice { x, axis, start }, rg)
    }

    // ---- composites ----

    /// `x @ w + b` over the last axis.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Cosine similarity of `a` and `b` along the last axis (keeps the axis with size 1).
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let last = self.value(a).ndim().saturating_sub(1);
        let ab = self.mul(a, b)?;
        let dot = self.sum_axis(ab, last)?;
        let aa = self.mul(a, a)?;
        let na = self.sum_axis(aa, last)?;
        let bb = self.mul(b, b)?;
        let nb = self.sum_axis(bb, last)?;
        let prod = self.mul(na, nb)?;
        let prod = self.add_scalar(prod, COSINE_EPS)?;
        let den = self.sqrt(prod)?;
        self.div(dot, den)
    }

    /// Pairwise cosine similarities between the rows of `x: [.., n, k]`, giving `[.., n, n]`.
    pub fn cosine_gram(&self, x: Var) -> Result<Var> {
        let last = self.value(x).ndim().saturating_sub(1);
        let sq = self.mul(x, x)?;
        let n2 = self.sum_axis(sq, last)?;
        let n2 = self.add_scalar(n2, COSINE_EPS)?;
        let norm = self.sqrt(n2)?;
        let unit = self.div(x, norm)?;
        let ut = self.transpose(unit)?;
        self.matmul(unit, ut)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(CoraError::BackwardReused);
        }
        let node = inner.nodes.get(loss.0).ok_or(CoraError::Detached)?;
        if node.value.numel() != 1 {
            return Err(CoraError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(CoraError::Detached);
        }
        inner.backward_done = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, sum_to_shape(&g, val(*a).shape()));
                    accumulate(&mut grads, *b, sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, sum_to_shape(&g, val(*a).shape()));
                    accumulate(&mut grads, *b, sum_to_shape(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let sa = bcast_strides(out.shape(), ta.shape());
                    let sb = bcast_strides(out.shape(), tb.shape());
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    let (da, db, gd) = (ta.data(), tb.data(), g.data());
                    if matches!(node.op, Op::Mul(..)) {
                        for_each_bcast(out.shape(), &sa, &sb, |o, oa, ob| {
                            ga[oa] += gd[o] * db[ob];
                            gb[ob] += gd[o] * da[oa];
                        });
                    } else {
                        for_each_bcast(out.shape(), &sa, &sb, |o, oa, ob| {
                            ga[oa] += gd[o] / db[ob];
                            gb[ob] -= gd[o] * da[oa] / (db[ob] * db[ob]);
                        });
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::MatMulShared(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let k = *ta.shape().last().unwrap();
                    let n = tb.shape()[1];
                    let rows = ta.numel() / k.max(1);
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; ta.numel()];
                        gemm(rows, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                        accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; tb.numel()];
                        gemm(k, rows, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                    }
                }
                Op::MatMulBatched(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let nd = ta.ndim();
                    let (m, k, n) = (ta.shape()[nd - 2], ta.shape()[nd - 1], tb.shape()[nd - 1]);
                    let batch = ta.numel() / (m * k).max(1);
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gb = vec![0.0; tb.numel()];
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let bs = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        gemm(m, n, k, gs, false, bs, true, &mut ga[bi * m * k..(bi + 1) * m * k], 0.0);
                        gemm(k, m, n, as_, true, gs, false, &mut gb[bi * k * n..(bi + 1) * k * n], 0.0);
                    }
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
                Op::TransposeLast2(a) => accumulate(&mut grads, *a, g.transpose_last2()),
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(&mut grads, *a, g.permute(&inv));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Expand(a) => accumulate(&mut grads, *a, sum_to_shape(&g, val(*a).shape())),
                Op::SumAxis(a) | Op::MeanAxis(a, _) => {
                    let ta = val(*a);
                    let scale = match node.op {
                        Op::MeanAxis(_, axis) => 1.0 / ta.shape()[axis] as f64,
                        _ => 1.0,
                    };
                    let sa = bcast_strides(ta.shape(), g.shape());
                    let zero = vec![0; ta.ndim()];
                    let mut ga = vec![0.0; ta.numel()];
                    let gd = g.data();
                    for_each_bcast(ta.shape(), &sa, &zero, |o, og, _| ga[o] = scale * gd[og]);
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let ta = val(*a);
                    let scale = if matches!(node.op, Op::MeanAll(_)) {
                        1.0 / ta.numel() as f64
                    } else {
                        1.0
                    };
                    accumulate(&mut grads, *a, Tensor::full(ta.shape(), g.item() * scale));
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner_len) = split_axis(out.shape(), *axis);
                    let (y, gd) = (out.data(), g.data());
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner_len {
                            let at = |l: usize| (o * len + l) * inner_len + i;
                            let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(out.shape().to_vec(), ga)?);
                }
                Op::Sigmoid(a) => accumulate(&mut grads, *a, zip(&g, out, |g, y| g * y * (1.0 - y))),
                Op::Tanh(a) => accumulate(&mut grads, *a, zip(&g, out, |g, y| g * (1.0 - y * y))),
                Op::Exp(a) => accumulate(&mut grads, *a, zip(&g, out, |g, y| g * y)),
                Op::Sqrt(a) => accumulate(&mut grads, *a, zip(&g, out, |g, y| 0.5 * g / y)),
                Op::Relu(a) => {
                    accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::Log(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| g / x)),
                Op::Softplus(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| g * sigmoid(x))),
                Op::Abs(a) => accumulate(
                    &mut grads,
                    *a,
                    zip(&g, val(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Powi(a, p) => {
                    let p = *p;
                    let ga = if p == 0 {
                        Tensor::zeros(g.shape())
                    } else {
                        zip(&g, val(*a), |g, x| g * p as f64 * x.powi(p as i32 - 1))
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskMul(a, mask) => accumulate(&mut grads, *a, zip(&g, mask, |g, m| g * m)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *xhat.shape().last().unwrap();
                    let rows = xhat.numel() / d;
                    let gam = val(*gamma).data();
                    let (gd, hd) = (g.data(), xhat.data());
                    let mut gx = vec![0.0; xhat.numel()];
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &hd[r * d..(r + 1) * d];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                            dxh[j] = gr[j] * gam[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * hr[j];
                        }
                        let c = rstd[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = c * (d as f64 * dxh[j] - s1 - hr[j] * s2);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xhat.shape().to_vec(), gx)?);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(gg));
                    accumulate(&mut grads, *beta, Tensor::from_vec(gb));
                }
                Op::Concat(xs, axis) => {
                    let (outer, _, inner_len) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    let total = out.shape()[*axis] * inner_len;
                    for v in xs {
                        let t = val(*v);
                        let blk = t.shape()[*axis] * inner_len;
                        let mut gv = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            gv.extend_from_slice(&g.data()[o * total + offset..o * total + offset + blk]);
                        }
                        offset += blk;
                        accumulate(&mut grads, *v, Tensor::new(t.shape().to_vec(), gv)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let tx = val(*x);
                    let (outer, len, inner_len) = split_axis(tx.shape(), *axis);
                    let width = out.shape()[*axis];
                    let mut gx = vec![0.0; tx.numel()];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner_len;
                        let src = o * width * inner_len;
                        gx[dst..dst + width * inner_len]
                            .copy_from_slice(&g.data()[src..src + width * inner_len]);
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip")
}
