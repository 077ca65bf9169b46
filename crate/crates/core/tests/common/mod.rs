#![allow(dead_code)]

use cora::adapter::{forward, mse_loss, AdapterState, BatchInputs, ForwardOptions};
use cora::autodiff::{Graph, Tensor, Var, COSINE_EPS};
use cora::dce::pearson_batch;
use cora::params::Bound;
use cora::Result;
use rand::Rng;

/// Overwrite every parameter with Gaussian noise so no layer sits at its
/// zero initialization.
pub fn randomize<R: Rng>(state: &mut AdapterState, scale: f64, rng: &mut R) {
    for e in state.store.entries_mut() {
        let shape = e.value.shape().to_vec();
        e.value = Tensor::randn(&shape, scale, rng);
    }
}

/// Owned counterpart of [`BatchInputs`].
pub struct Inputs {
    pub repr: Tensor,
    pub yhat_norm: Tensor,
    pub mean: Tensor,
    pub std: Tensor,
    pub pearson: Tensor,
    pub targets: Tensor,
}

impl Inputs {
    /// Random inputs for `[b, p, n, d]` representations and horizon `f`.
    /// Windows mix a shared factor with random loadings so the Pearson
    /// matrices have pairs of both signs well away from zero.
    pub fn random<R: Rng>(b: usize, p: usize, n: usize, d: usize, f: usize, rng: &mut R) -> Self {
        let len = 12;
        let common = Tensor::randn(&[b, 1, len], 1.0, rng);
        let load = Tensor::randn(&[1, n, 1], 1.5, rng);
        let noise = Tensor::randn(&[b, n, len], 0.5, rng);
        let windows = Tensor::from_fn(&[b, n, len], |ix| {
            load.get(&[0, ix[1], 0]) * common.get(&[ix[0], 0, ix[2]]) + noise.get(ix)
        });
        Self {
            repr: Tensor::randn(&[b, p, n, d], 1.0, rng),
            yhat_norm: Tensor::randn(&[b, n, f], 1.0, rng),
            mean: Tensor::randn(&[b, n, 1], 1.0, rng),
            std: Tensor::uniform(&[b, n, 1], 0.5, 2.0, rng),
            pearson: pearson_batch(&windows).unwrap().values,
            targets: Tensor::randn(&[b, n, f], 1.0, rng),
        }
    }

    pub fn batch(&self) -> BatchInputs<'_> {
        BatchInputs {
            repr: &self.repr,
            yhat_norm: &self.yhat_norm,
            mean: &self.mean,
            std: &self.std,
            pearson: Some(&self.pearson),
        }
    }
}

/// Raw-space MSE plus `lambda` times the contrastive loss, with the adapter
/// parameters supplied as graph leaves in store order.
pub fn full_loss(g: &Graph, vars: &[Var], state: &AdapterState, inputs: &Inputs, lambda: f64) -> Result<Var> {
    let p = Bound::from_vars(vars.to_vec());
    let out = forward(g, &p, state, &inputs.batch(), ForwardOptions::default())?;
    let mse = mse_loss(g, out.forecast, &inputs.targets)?;
    let aux = out.aux.expect("contrastive loss enabled").total;
    g.add(mse, g.scale(aux, lambda)?)
}

/// Contrastive loss by explicit loops: for each sample, average over rows
/// with some nonzero weight of `-ln(Σ_j w_ij e^{s_ij/τ} / Σ_k e^{s_ik/τ})`,
/// then average over samples.
pub fn contrastive_oracle(x: &Tensor, w: &Tensor, tau: f64) -> f64 {
    let s = x.shape();
    let (b, p, n, d) = (s[0], s[1], s[2], s[3]);
    let vec_of = |bi: usize, c: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(p * d);
        for pi in 0..p {
            for k in 0..d {
                v.push(x.get(&[bi, pi, c, k]));
            }
        }
        v
    };
    let mut total = 0.0;
    for bi in 0..b {
        let vs: Vec<Vec<f64>> = (0..n).map(|c| vec_of(bi, c)).collect();
        let norm = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() + COSINE_EPS).sqrt();
        let (mut sum, mut rows) = (0.0, 0);
        for i in 0..n {
            if (0..n).all(|j| w.get(&[bi, i, j]) == 0.0) {
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..n {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, c)| a * c).sum();
                let sim = dot / (norm(&vs[i]) * norm(&vs[j]));
                let e = (sim / tau).exp();
                den += e;
                num += w.get(&[bi, i, j]) * e;
            }
            sum += -(num / den).ln();
            rows += 1;
        }
        if rows > 0 {
            total += sum / rows as f64;
        }
    }
    total / b as f64
}

/// Pearson correlation of two sequences: means first, then centered sums.
pub fn pearson_two_pass(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len() as f64;
    let ma = a.iter().sum::<f64>() / len;
    let mb = b.iter().sum::<f64>() / len;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
