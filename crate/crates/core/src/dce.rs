//! Correlation estimation: Pearson statistics plus a learnable low-rank term.
//!
//! The learnable part is `Q V Qᵀ`, where `Q` is a per-window polynomial over a
//! shared basis `q` (coefficients predicted from the window representation)
//! and `V = sigmoid(relu(E1 E2ᵀ))` is global.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{CoraError, Result};
use crate::params::{Affine, Bound, Init, ParamId, ParamStore};

thread_local! {
    static CORRELATION_ALLOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of N×N correlation matrices materialized on this thread so far.
///
/// The inference path must leave this untouched; tests read it before and
/// after evaluation.
pub fn correlation_allocations() -> u64 {
    CORRELATION_ALLOCATIONS.with(|c| c.get())
}

fn count_allocation(n: u64) {
    CORRELATION_ALLOCATIONS.with(|c| c.set(c.get() + n));
}

#[derive(Clone, Debug, PartialEq)]
pub struct PearsonMatrix {
    /// `[N, N]`, or `[B, N, N]` for the batched variant.
    pub values: Tensor,
    /// Channels whose window had (numerically) zero variance.
    pub zero_variance: Vec<bool>,
}

/// Pearson correlation between the rows of `x`, a `n × len` row-major block.
fn pearson_block(x: &[f64], n: usize, len: usize, out: &mut [f64], flags: &mut [bool]) {
    let mut centered = vec![0.0; n * len];
    let mut ss = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * len..(i + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        let c = &mut centered[i * len..(i + 1) * len];
        for (dst, &v) in c.iter_mut().zip(row) {
            *dst = v - mean;
        }
        ss[i] = c.iter().map(|v| v * v).sum();
        // Relative floor: a constant row can leave round-off residue after centering.
        let scale = 1e-12 * mean.abs().max(1e-150);
        flags[i] = ss[i] <= len as f64 * scale * scale || ss[i] == 0.0;
    }
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = if flags[i] || flags[j] {
                0.0
            } else {
                let ci = &centered[i * len..(i + 1) * len];
                let cj = &centered[j * len..(j + 1) * len];
                let sxy: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                (sxy / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0)
            };
            out[i * n + j] = r;
            out[j * n + i] = r;
        }
    }
}

/// Pearson matrix of a single window `x: [N, L]`.
pub fn pearson_matrix(x: &Tensor) -> Result<PearsonMatrix> {
    if x.ndim() != 2 || x.shape()[1] < 2 {
        return Err(CoraError::shape(
            "pearson_matrix",
            format!("expected [N, L] with L >= 2, got {:?}", x.shape()),
        ));
    }
    let (n, len) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * n];
    let mut flags = vec![false; n];
    pearson_block(x.data(), n, len, &mut out, &mut flags);
    count_allocation(1);
    Ok(PearsonMatrix {
        values: Tensor::new(vec![n, n], out)?,
        zero_variance: flags,
    })
}

/// Pearson matrices for a batch of windows `x: [B, N, L]`; flags are OR-ed over the batch.
pub fn pearson_batch(x: &Tensor) -> Result<PearsonMatrix> {
    if x.ndim() != 3 || x.shape()[2] < 2 {
        return Err(CoraError::shape(
            "pearson_batch",
            format!("expected [B, N, L] with L >= 2, got {:?}", x.shape()),
        ));
    }
    let (b, n, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; b * n * n];
    let mut any = vec![false; n];
    let mut flags = vec![false; n];
    for w in 0..b {
        pearson_block(
            &x.data()[w * n * len..(w + 1) * n * len],
            n,
            len,
            &mut out[w * n * n..(w + 1) * n * n],
            &mut flags,
        );
        any.iter_mut().zip(&flags).for_each(|(a, f)| *a |= *f);
    }
    count_allocation(b as u64);
    Ok(PearsonMatrix {
        values: Tensor::new(vec![b, n, n], out)?,
        zero_variance: any,
    })
}

/// Learnable parameters of the correlation estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DceParams {
    pub q: ParamId,
    pub coef: Affine,
    pub e1: ParamId,
    pub e2: ParamId,
    pub degree: usize,
    pub rank: usize,
    pub expansion: usize,
}

/// Rank used when none is configured: `min(max(2, ceil(N/4)), 16)`.
pub fn default_rank(n: usize) -> usize {
    n.div_ceil(4).max(2).min(16)
}

impl DceParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n: usize,
        d: usize,
        degree: usize,
        rank: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || expansion == 0 {
            return Err(CoraError::Config("correlation rank and expansion must be positive".into()));
        }
        let q = store.add("dce.q", Tensor::uniform(&[n, rank], -0.5, 0.5, rng), true);
        let coef = Affine::new(store, "dce.coef", d, degree + 1, Init::Normal(0.1), rng);
        let e1 = store.add("dce.e1", Tensor::randn(&[rank, expansion], 0.1, rng), true);
        let e2 = store.add("dce.e2", Tensor::randn(&[rank, expansion], 0.1, rng), true);
        Ok(Self {
            q,
            coef,
            e1,
            e2,
            degree,
            rank,
            expansion,
        })
    }
}

/// `Σ_i coef[.., n, i] · q[n, m]^i` with `q^0 = 1`; `coef: [B, N, K+1]`, `q: [N, M]` → `[B, N, M]`.
pub fn polynomial_basis(g: &Graph, coef: Var, q: Var) -> Result<Var> {
    let cs = g.shape(coef);
    let terms = *cs.last().ok_or_else(|| CoraError::shape("polynomial_basis", "scalar coefficients"))?;
    let last = cs.len() - 1;
    let mut acc: Option<Var> = None;
    for i in 0..terms {
        let c = g.slice(coef, last, i, i + 1)?;
        let term = if i == 0 {
            let ones = g.constant(Tensor::ones(&g.shape(q)));
            g.mul(c, ones)?
        } else {
            let qi = g.powi(q, i as u32)?;
            g.mul(c, qi)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| CoraError::shape("polynomial_basis", "need at least one coefficient"))
}

/// Per-window coefficients `tanh(affine(mean over patches))` for `repr: [B, P, N, d]` → `[B, N, K+1]`.
pub fn coefficients(g: &Graph, p: &Bound, dce: &DceParams, repr: Var) -> Result<Var> {
    let s = g.shape(repr);
    if s.len() != 4 || s[3] != dce.coef.fan_in {
        return Err(CoraError::shape(
            "coefficients",
            format!("repr {s:?} vs feature dim {}", dce.coef.fan_in),
        ));
    }
    let pooled = g.mean_axis(repr, 1)?;
    let pooled = g.reshape(pooled, &[s[0], s[2], s[3]])?;
    let pre = dce.coef.forward(g, p, pooled)?;
    g.tanh(pre)
}

/// Time-varying factor `Q_t: [B, N, M]`.
pub fn time_varying_component(g: &Graph, p: &Bound, dce: &DceParams, repr: Var) -> Result<Var> {
    let coef = coefficients(g, p, dce, repr)?;
    let q = p.var(dce.q);
    if g.shape(q)[0] != g.shape(repr)[2] {
        return Err(CoraError::shape(
            "time_varying_component",
            format!("basis {:?} vs repr {:?}", g.shape(q), g.shape(repr)),
        ));
    }
    polynomial_basis(g, coef, q)
}

/// Time-invariant factor `V = sigmoid(relu(E1 E2ᵀ)): [M, M]`.
pub fn time_invariant_component(g: &Graph, p: &Bound, dce: &DceParams) -> Result<Var> {
    let e2t = g.transpose(p.var(dce.e2))?;
    let prod = g.matmul(p.var(dce.e1), e2t)?;
    let r = g.relu(prod)?;
    g.sigmoid(r)
}

/// `R + Q V Qᵀ` for `r: [B, N, N]`, `q_t: [B, N, M]`, `v: [M, M]`.
pub fn compose_correlation(g: &Graph, r: Var, q_t: Var, v: Var, symmetrize: bool) -> Result<Var> {
    let (rs, qs) = (g.shape(r), g.shape(q_t));
    if rs.len() != 3 || qs.len() != 3 || rs[0] != qs[0] || rs[1] != qs[1] || rs[2] != qs[1] {
        return Err(CoraError::shape("compose_correlation", format!("R {rs:?} vs Q {qs:?}")));
    }
    let qv = g.matmul(q_t, v)?;
    let qt = g.transpose(q_t)?;
    let learned = g.matmul(qv, qt)?;
    let learned = if symmetrize {
        let lt = g.transpose(learned)?;
        let s = g.add(learned, lt)?;
        g.scale(s, 0.5)?
    } else {
        learned
    };
    count_allocation(rs[0] as u64);
    g.add(r, learned)
}

#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// `Q̄ V Q̄ᵀ`.
    pub invariant: DMatrix<f64>,
    /// `Q̄ V Q̃ᵀ + Q̃ V Q̄ᵀ + Q̃ V Q̃ᵀ`.
    pub varying: DMatrix<f64>,
    pub residual: f64,
}

/// Split `(Q̄ + Q̃) V (Q̄ + Q̃)ᵀ` into its invariant and varying parts and report
/// the largest entrywise discrepancy of the split.
pub fn decompose_low_rank(qbar: &DMatrix<f64>, qtilde: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DecompositionReport> {
    let m = v.nrows();
    if v.ncols() != m || qbar.ncols() != m || qtilde.shape() != qbar.shape() {
        return Err(CoraError::shape(
            "decompose_low_rank",
            format!("Qbar {:?}, Qtilde {:?}, V {:?}", qbar.shape(), qtilde.shape(), v.shape()),
        ));
    }
    let invariant = qbar * v * qbar.transpose();
    let varying = qbar * v * qtilde.transpose() + qtilde * v * qbar.transpose() + qtilde * v * qtilde.transpose();
    let q = qbar + qtilde;
    let full = &q * v * q.transpose();
    let residual = (full - &invariant - &varying).amax();
    Ok(DecompositionReport {
        invariant,
        varying,
        residual,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolyFit {
    pub degree: usize,
    /// Monomial coefficients, lowest degree first.
    pub coefficients: Vec<f64>,
    pub max_error: f64,
    /// 2-norm condition number of the Vandermonde design matrix.
    pub condition: f64,
}

/// Least-squares polynomial fits of `target` on a uniform grid over `domain`,
/// one per degree in `degrees`, with the max absolute error on the grid.
pub fn polynomial_fits(
    target: impl Fn(f64) -> f64,
    degrees: std::ops::RangeInclusive<usize>,
    domain: (f64, f64),
    grid: usize,
) -> Result<Vec<PolyFit>> {
    let (lo, hi) = domain;
    if !(lo < hi) || grid < 2 {
        return Err(CoraError::Config(format!("bad fit domain {domain:?} with {grid} points")));
    }
    let xs: Vec<f64> = (0..grid).map(|i| lo + (hi - lo) * i as f64 / (grid - 1) as f64).collect();
    let ys = DVector::from_iterator(grid, xs.iter().map(|&x| target(x)));
    let mut out = Vec::new();
    for k in degrees {
        if k + 1 > grid {
            return Err(CoraError::Config(format!("degree {k} needs more than {grid} grid points")));
        }
        let a = DMatrix::from_fn(grid, k + 1, |r, c| xs[r].powi(c as i32));
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let coeffs = svd
            .solve(&ys, smax * 1e-15)
            .map_err(|e| CoraError::Config(format!("least-squares solve failed: {e}")))?;
        let resid = &a * &coeffs - &ys;
        out.push(PolyFit {
            degree: k,
            coefficients: coeffs.iter().copied().collect(),
            max_error: resid.amax(),
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(rows: &[&[f64]]) -> Tensor {
        let len = rows[0].len();
        Tensor::new(vec![rows.len(), len], rows.concat()).unwrap()
    }

    #[test]
    fn pearson_hand_values() {
        let r = pearson_matrix(&window(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[3.0, 2.0, 1.0]])).unwrap();
        assert!((r.values.get(&[0, 1]) - 1.0).abs() < 1e-15);
        assert!((r.values.get(&[0, 2]) + 1.0).abs() < 1e-15);
        let r = pearson_matrix(&window(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]])).unwrap();
        assert!((r.values.get(&[1, 0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_flags_constant_channel() {
        let r = pearson_matrix(&window(&[&[0.1, 0.1, 0.1], &[1.0, 2.0, 4.0]])).unwrap();
        assert_eq!(r.zero_variance, vec![true, false]);
        assert_eq!(r.values.get(&[0, 1]), 0.0);
        assert_eq!(r.values.get(&[0, 0]), 1.0);
    }

    #[test]
    fn pearson_rejects_single_step() {
        assert!(pearson_matrix(&window(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn polynomial_examples() {
        let g = Graph::new();
        let q = g.constant(Tensor::full(&[2, 3], 0.5));
        let coef = g.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 4.0, 1.0, 2.0, 4.0]).unwrap());
        let out = polynomial_basis(&g, coef, q).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 3.0).abs() < 1e-15));

        let qv = Tensor::from_fn(&[2, 3], |i| 0.1 * (i[0] * 3 + i[1]) as f64 - 0.2);
        let q = g.constant(qv.clone());
        let coef = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let out = polynomial_basis(&g, coef, q).unwrap();
        assert_eq!(g.value(out).data(), qv.data());

        let coef = g.constant(Tensor::new(vec![1, 2, 1], vec![0.7, -0.2]).unwrap());
        let out = polynomial_basis(&g, coef, q).unwrap();
        let v = g.value(out);
        for m in 0..3 {
            assert_eq!(v.get(&[0, 0, m]), 0.7);
            assert_eq!(v.get(&[0, 1, m]), -0.2);
        }
    }

    #[test]
    fn invariant_component_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dce = DceParams::new(&mut store, 4, 3, 1, 2, 1, &mut rng).unwrap();
        *store.get_mut(dce.e1) = Tensor::new(vec![2, 1], vec![1.0, -3.0]).unwrap();
        *store.get_mut(dce.e2) = Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let v = time_invariant_component(&g, &p, &dce).unwrap();
        let v = g.value(v);
        assert!((v.get(&[0, 0]) - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert_eq!(v.get(&[0, 1]), 0.5);
        assert_eq!(v.get(&[1, 0]), 0.5);
        assert_eq!(v.get(&[1, 1]), 0.5);
    }

    #[test]
    fn compose_identity_cases() {
        let g = Graph::new();
        let r = Tensor::from_fn(&[1, 3, 3], |i| if i[1] == i[2] { 1.0 } else { 0.3 });
        let rv = g.constant(r.clone());
        let q = g.constant(Tensor::zeros(&[1, 3, 2]));
        let v = g.constant(Tensor::ones(&[2, 2]));
        let m = compose_correlation(&g, rv, q, v, false).unwrap();
        assert_eq!(*g.value(m), r);

        let zero = g.constant(Tensor::zeros(&[1, 3, 3]));
        let eye = Tensor::from_fn(&[1, 3, 3], |i| if i[1] == i[2] { 1.0 } else { 0.0 });
        let q = g.constant(eye.clone());
        let v = g.constant(eye.clone().reshape(&[3, 3]).unwrap());
        let m = compose_correlation(&g, zero, q, v, false).unwrap();
        assert_eq!(*g.value(m), eye);
    }

    #[test]
    fn compose_rejects_mismatch() {
        let g = Graph::new();
        let r = g.constant(Tensor::zeros(&[1, 3, 3]));
        let q = g.constant(Tensor::zeros(&[1, 4, 2]));
        let v = g.constant(Tensor::zeros(&[2, 2]));
        assert!(compose_correlation(&g, r, q, v, false).is_err());
    }

    #[test]
    fn decomposition_degenerate_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qbar = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(2, 2, |_, _| rng.random_range(0.5..1.0));
        let zero = DMatrix::zeros(5, 2);
        let rep = decompose_low_rank(&qbar, &zero, &v).unwrap();
        assert_eq!(rep.varying.amax(), 0.0);
        let rep = decompose_low_rank(&zero, &qbar, &v).unwrap();
        assert_eq!(rep.invariant.amax(), 0.0);
        assert!((rep.varying - &qbar * &v * qbar.transpose()).amax() < 1e-15);
    }

    #[test]
    fn polynomial_fit_exact_cases() {
        let fits = polynomial_fits(|x| 2.0 - x + 0.5 * x * x, 2..=2, (-1.0, 1.0), 101).unwrap();
        assert!(fits[0].max_error < 1e-10);
        let fits = polynomial_fits(|_| 3.5, 0..=0, (-1.0, 1.0), 101).unwrap();
        assert!(fits[0].max_error < 1e-12);
        assert!(polynomial_fits(|x| x, 0..=3, (1.0, 1.0), 10).is_err());
    }

    #[test]
    fn default_rank_rule() {
        assert_eq!(default_rank(4), 2);
        assert_eq!(default_rank(8), 2);
        assert_eq!(default_rank(12), 3);
        assert_eq!(default_rank(512), 16);
    }
}
