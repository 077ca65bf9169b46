//! Re-projection of the two spaces, linear forecast head and the per-channel
//! gate against the backbone forecast.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::division::{apply_stack, ProjectionLayer};
use crate::error::{CoraError, Result};
use crate::params::{Affine, Bound, Init, ParamId, ParamStore};

pub const BETA_LOGIT_INIT: f64 = -5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub post_pos: Vec<ProjectionLayer>,
    pub post_neg: Vec<ProjectionLayer>,
    pub head: Affine,
    pub beta_logits: ParamId,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        patches: usize,
        dim: usize,
        channels: usize,
        horizon: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        let post_pos: Vec<_> = (0..depth)
            .map(|i| ProjectionLayer::new(store, &format!("fusion.pos.{i}"), patches, dim, rng))
            .collect();
        let post_neg = if shared {
            post_pos.clone()
        } else {
            (0..depth)
                .map(|i| ProjectionLayer::new(store, &format!("fusion.neg.{i}"), patches, dim, rng))
                .collect()
        };
        let head = Affine::new(store, "fusion.head", patches * dim, horizon, Init::Zeros, rng);
        let beta_logits = store.add("fusion.beta_logits", Tensor::full(&[channels], BETA_LOGIT_INIT), true);
        Self {
            post_pos,
            post_neg,
            head,
            beta_logits,
        }
    }
}

/// How the fusion gate is obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    Learned,
    /// Fixed gate value for every channel; receives no gradient.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Head output before gating, `[B, N, F]`.
    pub head: Var,
    /// Gated forecast in normalized space, `[B, N, F]`.
    pub forecast: Var,
}

/// `β ⊙ head(flatten(P3(x_pos) + P4(x_neg))) + (1 - β) ⊙ yhat`, per channel.
pub fn fuse_predict(
    g: &Graph,
    p: &Bound,
    fp: &FusionParams,
    x_pos: Var,
    x_neg: Var,
    yhat: Var,
    gate: Gate,
) -> Result<FusionOutput> {
    let s = g.shape(x_pos);
    let ys = g.shape(yhat);
    if s.len() != 4 || g.shape(x_neg) != s || ys.len() != 3 || ys[0] != s[0] || ys[1] != s[2] {
        return Err(CoraError::shape(
            "fuse_predict",
            format!("x_pos {s:?}, x_neg {:?}, yhat {ys:?}", g.shape(x_neg)),
        ));
    }
    let (b, pp, n, d) = (s[0], s[1], s[2], s[3]);
    let a = apply_stack(g, p, &fp.post_pos, x_pos)?;
    let c = apply_stack(g, p, &fp.post_neg, x_neg)?;
    let sum = g.add(a, c)?;
    let flat = g.permute(sum, &[0, 2, 1, 3])?;
    let flat = g.reshape(flat, &[b, n, pp * d])?;
    let head = fp.head.forward(g, p, flat)?;
    let beta = match gate {
        Gate::Learned => {
            let logits = p.var(fp.beta_logits);
            if g.shape(logits) != [n] {
                return Err(CoraError::shape(
                    "fuse_predict",
                    format!("gate logits {:?} for {n} channels", g.shape(logits)),
                ));
            }
            let beta = g.sigmoid(logits)?;
            g.reshape(beta, &[n, 1])?
        }
        Gate::Fixed(v) => g.constant(Tensor::full(&[n, 1], v)),
    };
    let diff = g.sub(head, yhat)?;
    let moved = g.mul(beta, diff)?;
    let forecast = g.add(yhat, moved)?;
    Ok(FusionOutput { head, forecast })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (ParamStore, FusionParams, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fp = FusionParams::new(&mut store, 1, 2, 3, n, 4, false, &mut rng);
        *store.get_mut(fp.head.w) = Tensor::randn(&[6, 4], 1.0, &mut rng);
        *store.get_mut(fp.head.b) = Tensor::randn(&[4], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 2, n, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[2, n, 4], 1.0, &mut rng);
        (store, fp, x, y)
    }

    fn run(store: &ParamStore, fp: &FusionParams, x: &Tensor, y: &Tensor, gate: Gate) -> (Tensor, Tensor) {
        let g = Graph::new();
        let p = store.bind(&g);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = fuse_predict(&g, &p, fp, xv, xv, yv, gate).unwrap();
        let r = (g.value(out.head).clone(), g.value(out.forecast).clone());
        r
    }

    #[test]
    fn closed_and_open_gates() {
        let (mut store, fp, x, y) = setup(3);
        *store.get_mut(fp.beta_logits) = Tensor::full(&[3], -30.0);
        let (_, f) = run(&store, &fp, &x, &y, Gate::Learned);
        assert!(f.max_abs_diff(&y) < 1e-9);
        *store.get_mut(fp.beta_logits) = Tensor::full(&[3], 30.0);
        let (h, f) = run(&store, &fp, &x, &y, Gate::Learned);
        assert!(f.max_abs_diff(&h) < 1e-9 * (1.0 + h.norm()));
    }

    #[test]
    fn half_gate_is_midpoint() {
        let (store, fp, x, y) = setup(1);
        let (h, f) = run(&store, &fp, &x, &y, Gate::Fixed(0.5));
        for i in 0..f.numel() {
            let mid = 0.5 * (h.data()[i] + y.data()[i]);
            assert!((f.data()[i] - mid).abs() < 1e-14);
        }
    }

    #[test]
    fn head_sees_sum_of_spaces() {
        let (store, fp, x, y) = setup(2);
        let (h, _) = run(&store, &fp, &x, &y, Gate::Fixed(0.0));
        // Zero-init post stacks: the head input is 2x, flattened per channel.
        let w = store.get(fp.head.w);
        let bias = store.get(fp.head.b);
        for b in 0..2 {
            for n in 0..2 {
                for f in 0..4 {
                    let mut acc = bias.get(&[f]);
                    for pi in 0..2 {
                        for k in 0..3 {
                            acc += 2.0 * x.get(&[b, pi, n, k]) * w.get(&[pi * 3 + k, f]);
                        }
                    }
                    assert!((h.get(&[b, n, f]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_head_leaks_nothing() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fp = FusionParams::new(&mut store, 2, 2, 3, 2, 4, false, &mut rng);
        let x = Tensor::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 2, 4], 1.0, &mut rng);
        let (_, f) = run(&store, &fp, &x, &y, Gate::Learned);
        let beta = 1.0 / (1.0 + 5f64.exp());
        for i in 0..f.numel() {
            assert!((f.data()[i] - (1.0 - beta) * y.data()[i]).abs() < 1e-14);
        }
    }
}
