//! Channel-aware projection stacks that split representations into a
//! positive and a negative latent space.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{CoraError, Result};
use crate::params::{Affine, Bound, Init, ParamId, ParamStore};

/// One squeeze-and-excitation style residual layer over `[B, P, N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    /// Per-position feature MLP `d -> d -> d`.
    pub feat_hidden: Affine,
    pub feat_out: Affine,
    /// Per-channel scoring MLP `P·d -> d -> 1`.
    pub score_hidden: Affine,
    pub score_out: Affine,
    pub patches: usize,
    pub dim: usize,
}

impl ProjectionLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, patches: usize, dim: usize, rng: &mut R) -> Self {
        let ln_gamma = store.add(format!("{name}.ln.gamma"), Tensor::ones(&[dim]), true);
        let ln_beta = store.add(format!("{name}.ln.beta"), Tensor::zeros(&[dim]), true);
        let feat_hidden = Affine::new(store, &format!("{name}.feat.0"), dim, dim, Init::He, rng);
        let feat_out = Affine::new(store, &format!("{name}.feat.1"), dim, dim, Init::Zeros, rng);
        let score_hidden = Affine::new(store, &format!("{name}.score.0"), patches * dim, dim, Init::He, rng);
        let score_out = Affine::new(store, &format!("{name}.score.1"), dim, 1, Init::Zeros, rng);
        Self {
            ln_gamma,
            ln_beta,
            feat_hidden,
            feat_out,
            score_hidden,
            score_out,
            patches,
            dim,
        }
    }
}

fn check_repr(op: &'static str, g: &Graph, x: Var, patches: usize, dim: usize) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != patches || s[3] != dim {
        return Err(CoraError::shape(op, format!("expected [B, {patches}, N, {dim}], got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Apply one layer, returning the output and the channel weights `W: [B, N]`.
pub fn project_with_weights(g: &Graph, p: &Bound, layer: &ProjectionLayer, x: Var) -> Result<(Var, Var)> {
    let [b, pp, n, d] = check_repr("channel_aware_project", g, x, layer.patches, layer.dim)?;
    let ln = g.layer_norm(x, p.var(layer.ln_gamma), p.var(layer.ln_beta))?;
    let per_channel = g.permute(ln, &[0, 2, 1, 3])?;
    let per_channel = g.reshape(per_channel, &[b, n, pp * d])?;
    let s = layer.score_hidden.forward(g, p, per_channel)?;
    let s = g.relu(s)?;
    let logits = layer.score_out.forward(g, p, s)?;
    let w = g.softmax(logits, 1)?;
    let w = g.reshape(w, &[b, n])?;
    let out = residual_update(g, p, layer, x, ln, w)?;
    Ok((out, w))
}

/// `x + MLP1(ln) ⊙ expand(w)` for given channel weights `w: [B, N]`.
fn residual_update(g: &Graph, p: &Bound, layer: &ProjectionLayer, x: Var, ln: Var, w: Var) -> Result<Var> {
    let s = g.shape(x);
    let h = layer.feat_hidden.forward(g, p, ln)?;
    let h = g.relu(h)?;
    let proj = layer.feat_out.forward(g, p, h)?;
    let w4 = g.reshape(w, &[s[0], 1, s[2], 1])?;
    let update = g.mul(proj, w4)?;
    g.add(x, update)
}

/// `x + MLP1(LN(x)) ⊙ expand(softmax_N(MLP2(flatten_P·d(LN(x)))))`.
pub fn channel_aware_project(g: &Graph, p: &Bound, layer: &ProjectionLayer, x: Var) -> Result<Var> {
    Ok(project_with_weights(g, p, layer, x)?.0)
}

pub fn apply_stack(g: &Graph, p: &Bound, stack: &[ProjectionLayer], x: Var) -> Result<Var> {
    stack.iter().try_fold(x, |h, layer| channel_aware_project(g, p, layer, h))
}

/// Positive/negative projection stacks. In single-branch mode both stacks
/// refer to the same parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HdParams {
    pub pos: Vec<ProjectionLayer>,
    pub neg: Vec<ProjectionLayer>,
    pub shared: bool,
}

impl HdParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        patches: usize,
        dim: usize,
        shared: bool,
        rng: &mut R,
    ) -> Self {
        let pos: Vec<_> = (0..depth)
            .map(|i| ProjectionLayer::new(store, &format!("{prefix}.pos.{i}"), patches, dim, rng))
            .collect();
        let neg = if shared {
            pos.clone()
        } else {
            (0..depth)
                .map(|i| ProjectionLayer::new(store, &format!("{prefix}.neg.{i}"), patches, dim, rng))
                .collect()
        };
        Self { pos, neg, shared }
    }

    pub fn depth(&self) -> usize {
        self.pos.len()
    }
}

/// Map `repr` into the positive and negative spaces.
pub fn divide(g: &Graph, p: &Bound, hd: &HdParams, repr: Var) -> Result<(Var, Var)> {
    let x_pos = apply_stack(g, p, &hd.pos, repr)?;
    let x_neg = if hd.shared { x_pos } else { apply_stack(g, p, &hd.neg, repr)? };
    Ok((x_pos, x_neg))
}
