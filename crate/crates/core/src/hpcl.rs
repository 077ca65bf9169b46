//! Threshold masks over the estimated correlation and the dual contrastive
//! objective that pulls strongly related channels together in each space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{CoraError, Result};

/// Width of the sigmoid used by the soft gate.
pub const SOFT_GATE_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpclConfig {
    /// Initial threshold; stored through softplus so it stays nonnegative.
    pub eps_init: f64,
    pub tau: f64,
    pub lambda_aux: f64,
    /// Replace the hard indicator by `sigmoid((|m| - eps) / 0.05)`, which lets eps learn.
    pub soft_gate: bool,
    /// Use 0/1 pair weights instead of the retained correlation values.
    pub binarize: bool,
}

impl Default for HpclConfig {
    fn default() -> Self {
        Self {
            eps_init: 0.3,
            tau: 0.5,
            lambda_aux: 1.0,
            soft_gate: false,
            binarize: false,
        }
    }
}

impl HpclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoraError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.eps_init >= 0.0) {
            return Err(CoraError::Config(format!("eps must be >= 0, got {}", self.eps_init)));
        }
        if !(self.lambda_aux >= 0.0) {
            return Err(CoraError::Config(format!("lambda_aux must be >= 0, got {}", self.lambda_aux)));
        }
        Ok(())
    }
}

/// Unconstrained value whose softplus equals `eps`.
pub fn softplus_inverse(eps: f64) -> f64 {
    if eps > 30.0 {
        eps
    } else {
        eps.exp_m1().max(f64::MIN_POSITIVE).ln()
    }
}

/// Retained entries of the correlation: `pos` holds values above `eps`,
/// `neg` holds (negative) values below `-eps`.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair {
    pub pos: Var,
    pub neg: Var,
}

/// Threshold `m: [.., N, N]` at `eps`. `eps` must be a scalar node; under the
/// hard gate it only supplies a value.
pub fn threshold_masks(g: &Graph, m: Var, eps: Var, cfg: &HpclConfig) -> Result<MaskPair> {
    if !g.value(eps).shape().is_empty() {
        return Err(CoraError::shape("threshold_masks", "eps must be a scalar"));
    }
    if cfg.soft_gate {
        let width = 1.0 / SOFT_GATE_WIDTH;
        let neg_m = g.scale(m, -1.0)?;
        let pos_gate = g.sigmoid(g.scale(g.sub(m, eps)?, width)?)?;
        let neg_gate = g.sigmoid(g.scale(g.sub(neg_m, eps)?, width)?)?;
        if cfg.binarize {
            return Ok(MaskPair {
                pos: pos_gate,
                neg: g.scale(neg_gate, -1.0)?,
            });
        }
        let pos = g.mul(g.relu(m)?, pos_gate)?;
        let neg = g.mul(g.relu(neg_m)?, neg_gate)?;
        return Ok(MaskPair {
            pos,
            neg: g.scale(neg, -1.0)?,
        });
    }
    let e = g.value(eps).item();
    if cfg.binarize {
        let pos = g.value(m).map(|v| if v > e { 1.0 } else { 0.0 });
        let neg = g.value(m).map(|v| if v < -e { -1.0 } else { 0.0 });
        // Route the support decisions into the branch signature.
        let _ = g.hard_gate(m, |v| v > e)?;
        let _ = g.hard_gate(m, |v| v < -e)?;
        return Ok(MaskPair {
            pos: g.constant(pos),
            neg: g.constant(neg),
        });
    }
    Ok(MaskPair {
        pos: g.hard_gate(m, |v| v > e)?,
        neg: g.hard_gate(m, |v| v < -e)?,
    })
}

/// `-(1/N') Σ_i log(Σ_j w_ij e^{s_ij/τ} / Σ_k e^{s_ik/τ})` averaged over the batch,
/// with `s` the cosine similarity of the flattened `P×d` channel representations.
///
/// `x: [B, P, N, d]`, `weights: [B, N, N]` (nonnegative). Rows whose weights
/// are all zero are skipped and `N'` counts the remaining rows; a sample with
/// no usable row contributes 0.
pub fn contrastive_loss(g: &Graph, x: Var, weights: Var, tau: f64) -> Result<Var> {
    let s = g.shape(x);
    let ws = g.shape(weights);
    if s.len() != 4 || ws != [s[0], s[2], s[2]] {
        return Err(CoraError::shape(
            "contrastive_loss",
            format!("x {s:?} with weights {ws:?}"),
        ));
    }
    if !(tau > 0.0) {
        return Err(CoraError::Config(format!("tau must be > 0, got {tau}")));
    }
    let (b, p, n, d) = (s[0], s[1], s[2], s[3]);
    let (valid, inv_count) = {
        let w = g.value(weights);
        let mut valid = vec![0.0; b * n];
        let mut inv = vec![0.0; b];
        for bi in 0..b {
            let mut count = 0usize;
            for i in 0..n {
                let row = &w.data()[(bi * n + i) * n..(bi * n + i + 1) * n];
                if row.iter().any(|&v| v != 0.0) {
                    valid[bi * n + i] = 1.0;
                    count += 1;
                }
            }
            inv[bi] = if count > 0 { 1.0 / count as f64 } else { 0.0 };
        }
        (
            Tensor::new(vec![b, n, 1], valid)?,
            Tensor::new(vec![b, 1, 1], inv)?,
        )
    };
    let flat = g.permute(x, &[0, 2, 1, 3])?;
    let flat = g.reshape(flat, &[b, n, p * d])?;
    let sim = g.cosine_gram(flat)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let e = g.exp(logits)?;
    let den = g.sum_axis(e, 2)?;
    let we = g.mul(weights, e)?;
    let num = g.sum_axis(we, 2)?;
    // Empty rows get numerator 1 so the log stays finite; they are masked out below.
    let fill = g.constant(valid.map(|v| 1.0 - v));
    let num = g.add(num, fill)?;
    let row = g.sub(g.log(den)?, g.log(num)?)?;
    let row = g.mask_mul(row, valid)?;
    let per_sample = g.sum_axis(row, 1)?;
    let per_sample = g.mul(per_sample, g.constant(inv_count))?;
    g.mean(per_sample)
}

#[derive(Clone, Copy, Debug)]
pub struct AuxLoss {
    pub pos: Var,
    pub neg: Var,
    pub total: Var,
}

/// `L_pos + L_neg`, using `|M_neg|` as pair weights in the negative space.
pub fn aux_loss(g: &Graph, x_pos: Var, x_neg: Var, masks: &MaskPair, cfg: &HpclConfig) -> Result<AuxLoss> {
    let pos = contrastive_loss(g, x_pos, masks.pos, cfg.tau)?;
    let neg_w = g.abs(masks.neg)?;
    let neg = contrastive_loss(g, x_neg, neg_w, cfg.tau)?;
    let total = g.add(pos, neg)?;
    Ok(AuxLoss { pos, neg, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks_for(m: Vec<f64>, n: usize, eps: f64, cfg: &HpclConfig) -> (Tensor, Tensor) {
        let g = Graph::new();
        let mv = g.constant(Tensor::new(vec![1, n, n], m).unwrap());
        let e = g.constant(Tensor::scalar(eps));
        let mp = threshold_masks(&g, mv, e, cfg).unwrap();
        let out = (g.value(mp.pos).clone(), g.value(mp.neg).clone());
        out
    }

    #[test]
    fn hand_thresholding() {
        let m = vec![1.0, 0.7, -0.8, 0.7, 1.0, 0.1, -0.8, 0.1, 1.0];
        let (pos, neg) = masks_for(m, 3, 0.5, &HpclConfig::default());
        assert_eq!(pos.data(), &[1.0, 0.7, 0.0, 0.7, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(neg.data(), &[0.0, 0.0, -0.8, 0.0, 0.0, 0.0, -0.8, 0.0, 0.0]);
    }

    #[test]
    fn large_eps_keeps_diagonal_only() {
        let m = vec![1.0, 0.7, -0.8, 0.7, 1.0, 0.1, -0.8, 0.1, 1.0];
        let (pos, neg) = masks_for(m, 3, 0.9, &HpclConfig::default());
        assert_eq!(pos.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarized_masks_are_unit() {
        let m = vec![1.0, 0.7, -0.8, 0.7, 1.0, 0.1, -0.8, 0.1, 1.0];
        let cfg = HpclConfig {
            binarize: true,
            ..HpclConfig::default()
        };
        let (pos, neg) = masks_for(m, 3, 0.5, &cfg);
        assert_eq!(pos.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(neg.data(), &[0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn soft_gate_weights_are_signed_correctly() {
        let m = vec![1.0, 0.7, -0.8, 0.7, 1.0, 0.1, -0.8, 0.1, 1.0];
        let cfg = HpclConfig {
            soft_gate: true,
            ..HpclConfig::default()
        };
        let (pos, neg) = masks_for(m, 3, 0.5, &cfg);
        assert!(pos.data().iter().all(|&v| v >= 0.0));
        assert!(neg.data().iter().all(|&v| v <= 0.0));
        assert!((pos.get(&[0, 0, 1]) - 0.7 / (1.0 + (-4.0f64).exp())).abs() < 1e-12);
        assert_eq!(pos.get(&[0, 0, 2]), 0.0);
    }

    fn loss_of(x: Tensor, w: Tensor, tau: f64) -> f64 {
        let g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let l = contrastive_loss(&g, xv, wv, tau).unwrap();
        let out = g.value(l).item();
        out
    }

    #[test]
    fn identical_representations() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| [0.3, -1.2][i[3]]);
        let all = Tensor::ones(&[1, 2, 2]);
        assert!(loss_of(x.clone(), all, 0.5).abs() < 1e-12);
        let eye = Tensor::from_fn(&[1, 2, 2], |i| if i[1] == i[2] { 1.0 } else { 0.0 });
        assert!((loss_of(x, eye, 0.5) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_rows_are_skipped() {
        let x = Tensor::from_fn(&[1, 1, 3, 2], |i| (i[2] * 2 + i[3]) as f64 + 1.0);
        let w = Tensor::zeros(&[1, 3, 3]);
        assert_eq!(loss_of(x.clone(), w, 0.5), 0.0);
        let mut w = Tensor::zeros(&[1, 3, 3]);
        w.set(&[0, 1, 1], 1.0);
        w.set(&[0, 1, 2], 1.0);
        let single = loss_of(x.clone(), w.clone(), 0.5);
        // The only usable row is averaged by itself, not divided by N.
        let g = Graph::new();
        let xv = g.constant(x);
        let flat = g.reshape(g.permute(xv, &[0, 2, 1, 3]).unwrap(), &[1, 3, 2]).unwrap();
        let sim = g.cosine_gram(flat).unwrap();
        let s = g.value(sim).clone();
        let e = |j: usize| (s.get(&[0, 1, j]) / 0.5).exp();
        let expect = -((e(1) + e(2)) / (e(0) + e(1) + e(2))).ln();
        assert!((single - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes_and_tau() {
        let x = Tensor::zeros(&[1, 1, 3, 2]);
        let g = Graph::new();
        let xv = g.constant(x);
        let w = g.constant(Tensor::ones(&[1, 2, 2]));
        assert!(contrastive_loss(&g, xv, w, 0.5).is_err());
        let w = g.constant(Tensor::ones(&[1, 3, 3]));
        assert!(contrastive_loss(&g, xv, w, 0.0).is_err());
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for eps in [0.0001, 0.3, 1.0, 5.0] {
            let raw = softplus_inverse(eps);
            assert!(((1.0 + raw.exp()).ln() - eps).abs() < 1e-12);
        }
    }
}
