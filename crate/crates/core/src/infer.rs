//! Graph-free forward pass over the division and fusion layers only.
//!
//! This is the deployment path: no correlation estimate and no contrastive
//! masks are built, so its cost is linear in the channel count. It is generic
//! over `f32` and `f64`; training always runs through the graph in `f64`.

use std::fmt::Debug;

use num_traits::Float;

use crate::adapter::AdapterState;
use crate::autodiff::{Tensor, LAYER_NORM_EPS};
use crate::division::ProjectionLayer;
use crate::error::{CoraError, Result};
use crate::params::{Affine, ParamStore};

/// Channel rows per block of windows in the inference path.
const BLOCK_ROWS: usize = 1024;

/// Windows per block for `channels` channels, sized so one block's
/// intermediates stay cache-resident whatever the channel count.
pub fn block_windows(channels: usize) -> usize {
    (BLOCK_ROWS / channels.max(1)).max(1)
}

/// Floating-point types the inference path runs in.
pub trait Real: Float + Debug + Send + Sync + 'static {
    /// `out = a @ b` for row-major `a: [m, k]`, `b: [k, n]`.
    fn matmul(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], out: &mut [Self]);

    fn of(v: f64) -> Self {
        Self::from(v).expect("finite conversion")
    }
}

impl Real for f64 {
    fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
        // SAFETY: the assertion above bounds every access of the row-major matrices.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, out.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Real for f32 {
    fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
        // SAFETY: as for f64.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, out.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

#[derive(Clone, Debug)]
struct Dense<T> {
    w: Vec<T>,
    b: Vec<T>,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Real> Dense<T> {
    fn from_store(store: &ParamStore, a: &Affine) -> Self {
        Self {
            w: convert(store.get(a.w)),
            b: convert(store.get(a.b)),
            fan_in: a.fan_in,
            fan_out: a.fan_out,
        }
    }

    /// `x @ w + b` over `rows` rows, optionally followed by relu.
    fn apply(&self, x: &[T], rows: usize, relu: bool) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.fan_out];
        T::matmul(rows, self.fan_in, self.fan_out, x, &self.w, &mut out);
        for row in out.chunks_mut(self.fan_out) {
            for (v, &b) in row.iter_mut().zip(&self.b) {
                *v = *v + b;
                if relu && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Layer<T> {
    gamma: Vec<T>,
    beta: Vec<T>,
    feat_hidden: Dense<T>,
    feat_out: Dense<T>,
    score_hidden: Dense<T>,
    score_out: Dense<T>,
}

impl<T: Real> Layer<T> {
    fn from_store(store: &ParamStore, l: &ProjectionLayer) -> Self {
        Self {
            gamma: convert(store.get(l.ln_gamma)),
            beta: convert(store.get(l.ln_beta)),
            feat_hidden: Dense::from_store(store, &l.feat_hidden),
            feat_out: Dense::from_store(store, &l.feat_out),
            score_hidden: Dense::from_store(store, &l.score_hidden),
            score_out: Dense::from_store(store, &l.score_out),
        }
    }

    /// In-place residual update of `x: [B, P, N, d]`.
    fn apply(&self, x: &mut [T], [b, p, n, d]: [usize; 4]) {
        let rows = b * p * n;
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let mut ln = vec![T::zero(); x.len()];
        for (row, out) in x.chunks(d).zip(ln.chunks_mut(d)) {
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / dn;
            let rs = (var + eps).sqrt().recip();
            for j in 0..d {
                out[j] = (row[j] - mu) * rs * self.gamma[j] + self.beta[j];
            }
        }
        // Channel-major copy for the scoring MLP: [B, N, P·d].
        let mut per_channel = vec![T::zero(); x.len()];
        for bi in 0..b {
            for pi in 0..p {
                for ni in 0..n {
                    let src = ((bi * p + pi) * n + ni) * d;
                    let dst = ((bi * n + ni) * p + pi) * d;
                    per_channel[dst..dst + d].copy_from_slice(&ln[src..src + d]);
                }
            }
        }
        let s = self.score_hidden.apply(&per_channel, b * n, true);
        let logits = self.score_out.apply(&s, b * n, false);
        let mut w = logits;
        for row in w.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let h = self.feat_hidden.apply(&ln, rows, true);
        let proj = self.feat_out.apply(&h, rows, false);
        for (r, (xr, pr)) in x.chunks_mut(d).zip(proj.chunks(d)).enumerate() {
            let (bi, ni) = (r / (p * n), r % n);
            let wv = w[bi * n + ni];
            for (xv, &pv) in xr.iter_mut().zip(pr) {
                *xv = *xv + pv * wv;
            }
        }
    }
}

fn convert<T: Real>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| T::of(v)).collect()
}

/// Division and fusion weights copied out of an [`AdapterState`] in precision `T`.
#[derive(Clone, Debug)]
pub struct InferenceModel<T> {
    pos: Vec<Layer<T>>,
    neg: Vec<Layer<T>>,
    shared: bool,
    post_pos: Vec<Layer<T>>,
    post_neg: Vec<Layer<T>>,
    head: Dense<T>,
    beta: Vec<T>,
    gate_override: Option<T>,
    patches: usize,
    channels: usize,
    dim: usize,
    horizon: usize,
}

impl<T: Real> InferenceModel<T> {
    pub fn new(state: &AdapterState) -> Self {
        let s = &state.store;
        let layers = |ls: &[ProjectionLayer]| ls.iter().map(|l| Layer::from_store(s, l)).collect::<Vec<_>>();
        let c = &state.config;
        let beta = s
            .get(state.fusion.beta_logits)
            .data()
            .iter()
            .map(|&v| T::of(1.0 / (1.0 + (-v).exp())))
            .collect();
        Self {
            pos: layers(&state.hd.pos),
            neg: layers(&state.hd.neg),
            shared: state.hd.shared,
            post_pos: layers(&state.fusion.post_pos),
            post_neg: layers(&state.fusion.post_neg),
            head: Dense::from_store(s, &state.fusion.head),
            beta,
            gate_override: c.fixed_gate.map(T::of),
            patches: c.patches,
            channels: c.channels,
            dim: c.repr_dim,
            horizon: c.horizon,
        }
    }

    /// Use the same gate value for every channel instead of the learned one.
    pub fn with_fixed_gate(mut self, beta: f64) -> Self {
        self.gate_override = Some(T::of(beta));
        self
    }

    fn check(&self, repr: &[T], batch: usize) -> Result<[usize; 4]> {
        let dims = [batch, self.patches, self.channels, self.dim];
        if repr.len() != dims.iter().product::<usize>() {
            return Err(CoraError::shape(
                "inference",
                format!("{} values for repr of shape {dims:?}", repr.len()),
            ));
        }
        Ok(dims)
    }

    fn block(&self) -> usize {
        block_windows(self.channels)
    }

    fn divide_block(&self, repr: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<T>) {
        let mut pos = repr.to_vec();
        for l in &self.pos {
            l.apply(&mut pos, dims);
        }
        if self.shared {
            return (pos.clone(), pos);
        }
        let mut neg = repr.to_vec();
        for l in &self.neg {
            l.apply(&mut neg, dims);
        }
        (pos, neg)
    }

    /// Positive and negative space representations, each `[B, P, N, d]`.
    pub fn divide(&self, repr: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>)> {
        let [_, p, n, d] = self.check(repr, batch)?;
        let per = p * n * d;
        let (mut pos, mut neg) = (Vec::with_capacity(repr.len()), Vec::with_capacity(repr.len()));
        for chunk in repr.chunks(self.block() * per) {
            let (a, c) = self.divide_block(chunk, [chunk.len() / per, p, n, d]);
            pos.extend_from_slice(&a);
            neg.extend_from_slice(&c);
        }
        Ok((pos, neg))
    }

    /// Gated forecast in normalized space, `[B, N, F]`.
    ///
    /// Windows are processed in blocks of bounded size so the working set
    /// stays cache-resident and the cost grows linearly with the channel count.
    pub fn predict_norm(&self, repr: &[T], yhat_norm: &[T], batch: usize) -> Result<Vec<T>> {
        let [b, p, n, d] = self.check(repr, batch)?;
        let f = self.horizon;
        if yhat_norm.len() != b * n * f {
            return Err(CoraError::shape(
                "inference",
                format!("{} backbone values for [{b}, {n}, {f}]", yhat_norm.len()),
            ));
        }
        let k = self.block();
        let mut out = Vec::with_capacity(b * n * f);
        for (r, y) in repr.chunks(k * p * n * d).zip(yhat_norm.chunks(k * n * f)) {
            out.extend_from_slice(&self.predict_block(r, y, [y.len() / (n * f), p, n, d]));
        }
        Ok(out)
    }

    fn predict_block(&self, repr: &[T], yhat_norm: &[T], [b, p, n, d]: [usize; 4]) -> Vec<T> {
        let f = self.horizon;
        let (mut a, mut c) = self.divide_block(repr, [b, p, n, d]);
        for l in &self.post_pos {
            l.apply(&mut a, [b, p, n, d]);
        }
        for l in &self.post_neg {
            l.apply(&mut c, [b, p, n, d]);
        }
        let mut flat = vec![T::zero(); a.len()];
        for bi in 0..b {
            for pi in 0..p {
                for ni in 0..n {
                    let src = ((bi * p + pi) * n + ni) * d;
                    let dst = ((bi * n + ni) * p + pi) * d;
                    for j in 0..d {
                        flat[dst + j] = a[src + j] + c[src + j];
                    }
                }
            }
        }
        let mut out = self.head.apply(&flat, b * n, false);
        for (r, (o, y)) in out.chunks_mut(f).zip(yhat_norm.chunks(f)).enumerate() {
            let beta = self.gate_override.unwrap_or(self.beta[r % n]);
            for (ov, &yv) in o.iter_mut().zip(y) {
                *ov = yv + beta * (*ov - yv);
            }
        }
        out
    }
}
