//! Frozen, channel-independent patch-linear forecaster.
//!
//! Each channel of a window is z-scored, cut into `P = L / l` patches, every
//! patch is embedded by the same `l × d` matrix, and the flattened `P·d`
//! embedding is mapped to the horizon by a `(P·d) × F` head. The forecast is
//! de-normalized with the window's own statistics.
//!
//! Checkpoint layout (all little endian):
//!
//! ```text
//! 8 bytes   magic "CORA-BB\0"
//! u32       format version (1)
//! u32       reserved, 0
//! u64 x 5   lookback, horizon, patch_len, repr_dim, seed
//! f64       ridge
//! f64 x l*d        embedding, row-major
//! f64 x P*d*F      head, row-major
//! ```

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Tensor};
use crate::data::WindowBatch;
use crate::error::{CoraError, Result};
use crate::io::write_atomic;

/// Floor on the per-window standard deviation.
pub const STD_FLOOR: f64 = 1e-8;
const MAGIC: &[u8; 8] = b"CORA-BB\0";
const VERSION: u32 = 1;
const MAX_RIDGE_ESCALATIONS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub repr_dim: usize,
    pub seed: u64,
    /// Ridge strength relative to the number of training rows.
    pub ridge: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            repr_dim: 32,
            seed: 0,
            ridge: 1e-3,
        }
    }
}

impl BackboneConfig {
    pub fn patches(&self) -> usize {
        self.lookback / self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.lookback == 0 || self.lookback % self.patch_len != 0 {
            return Err(CoraError::Config(format!(
                "lookback {} must be a positive multiple of patch_len {}",
                self.lookback, self.patch_len
            )));
        }
        if self.repr_dim < 2 || self.horizon == 0 {
            return Err(CoraError::Config("repr_dim must be >= 2 and horizon >= 1".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(CoraError::Config(format!("ridge must be > 0, got {}", self.ridge)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub config: BackboneConfig,
    /// `[l, d]`.
    pub embedding: Tensor,
    /// `[P·d, F]`.
    pub head: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Raw-space MSE on the pretraining corpus.
    pub train_mse: f64,
    pub ridge_used: f64,
    /// Number of times the ridge was multiplied by 10 after a failed factorization.
    pub ridge_escalations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// `[B, P, N, d]`.
    pub repr: Tensor,
    /// Forecast in normalized space, `[B, N, F]`.
    pub yhat_norm: Tensor,
    /// Forecast in raw space, `[B, N, F]`.
    pub yhat: Tensor,
    /// `[B, N, 1]`.
    pub mean: Tensor,
    /// Floored standard deviation, `[B, N, 1]`.
    pub std: Tensor,
    /// Windows × channels whose standard deviation hit the floor.
    pub zero_variance: usize,
}

/// Per-(window, channel) mean and floored population std of `x: [B, N, L]`.
fn instance_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let l = x.shape()[2];
    let rows = x.numel() / l.max(1);
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    let mut flagged = 0;
    for r in 0..rows {
        let row = &x.data()[r * l..(r + 1) * l];
        let m = row.iter().sum::<f64>() / l as f64;
        let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / l as f64;
        let s = v.sqrt();
        if s < STD_FLOOR {
            flagged += 1;
        }
        mean.push(m);
        std.push(s.max(STD_FLOOR));
    }
    (mean, std, flagged)
}

/// Normalized windows as rows of `l`-step patches: `[B·N·P, l]` (row-major).
fn normalized_patches(x: &Tensor, mean: &[f64], std: &[f64]) -> Vec<f64> {
    let l = x.shape()[2];
    let mut out = Vec::with_capacity(x.numel());
    for (r, (m, s)) in mean.iter().zip(std).enumerate() {
        out.extend(x.data()[r * l..(r + 1) * l].iter().map(|v| (v - m) / s));
    }
    out
}

fn check_inputs(op: &'static str, config: &BackboneConfig, x: &Tensor) -> Result<()> {
    if x.ndim() != 3 || x.shape()[2] != config.lookback {
        return Err(CoraError::shape(
            op,
            format!("expected [B, N, {}] windows, got {:?}", config.lookback, x.shape()),
        ));
    }
    Ok(())
}

/// Fit the embedding (principal directions of normalized patches, padded with
/// seeded random columns when `d > l`) and a ridge least-squares head.
pub fn pretrain_backbone(corpus: &WindowBatch, config: &BackboneConfig) -> Result<(BackboneState, PretrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(CoraError::Data("pretraining corpus is empty".into()));
    }
    check_inputs("pretrain_backbone", config, &corpus.inputs)?;
    if corpus.horizon() != config.horizon {
        return Err(CoraError::shape(
            "pretrain_backbone",
            format!("targets have horizon {}, config says {}", corpus.horizon(), config.horizon),
        ));
    }
    let (l, d, p, f) = (config.patch_len, config.repr_dim, config.patches(), config.horizon);
    let (mean, std, _) = instance_stats(&corpus.inputs);
    let patches = normalized_patches(&corpus.inputs, &mean, &std);
    let n_patch = patches.len() / l;

    let mut cov = vec![0.0; l * l];
    gemm(l, n_patch, l, &patches, true, &patches, false, &mut cov, 0.0);
    let cov = DMatrix::from_row_slice(l, l, &cov) / n_patch as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let random = Tensor::randn(&[l, d], 1.0 / (l as f64).sqrt(), &mut rng);
    let embedding = Tensor::from_fn(&[l, d], |ix| {
        let (row, col) = (ix[0], ix[1]);
        if col < l {
            let v = eig.eigenvectors.column(order[col]);
            // Fix the sign so the largest-magnitude component is positive.
            let pivot = v.iter().fold(0.0f64, |acc, &x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                -v[row]
            } else {
                v[row]
            }
        } else {
            random.get(&[row, col])
        }
    });

    let rows = corpus.len() * corpus.channels();
    let feats = embed_rows(&patches, n_patch, &embedding, l, d);
    let k = p * d;
    let mut yn = Vec::with_capacity(rows * f);
    for (r, (m, s)) in mean.iter().zip(&std).enumerate() {
        yn.extend(corpus.targets.data()[r * f..(r + 1) * f].iter().map(|v| (v - m) / s));
    }
    let mut gram = vec![0.0; k * k];
    gemm(k, rows, k, &feats, true, &feats, false, &mut gram, 0.0);
    let mut rhs = vec![0.0; k * f];
    gemm(k, rows, f, &feats, true, &yn, false, &mut rhs, 0.0);
    let gram = DMatrix::from_row_slice(k, k, &gram);
    let rhs = DMatrix::from_row_slice(k, f, &rhs);

    let mut ridge = config.ridge;
    let mut escalations = 0;
    let head = loop {
        let mut a = gram.clone();
        for i in 0..k {
            a[(i, i)] += ridge * rows as f64;
        }
        if let Some(ch) = a.cholesky() {
            let sol = ch.solve(&rhs);
            if sol.iter().all(|v| v.is_finite()) {
                break sol;
            }
        }
        if escalations == MAX_RIDGE_ESCALATIONS {
            return Err(CoraError::Data("normal equations stay singular after raising the ridge".into()));
        }
        ridge *= 10.0;
        escalations += 1;
    };
    let head = Tensor::from_fn(&[k, f], |ix| head[(ix[0], ix[1])]);
    let state = BackboneState {
        config: config.clone(),
        embedding,
        head,
    };
    let out = backbone_forward(&state, &corpus.inputs)?;
    let train_mse = out
        .yhat
        .data()
        .iter()
        .zip(corpus.targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / out.yhat.numel() as f64;
    Ok((
        state,
        PretrainReport {
            train_mse,
            ridge_used: ridge,
            ridge_escalations: escalations,
        },
    ))
}

/// Patch embeddings as `[rows, P·d]`, where consecutive `P` patches form a row.
fn embed_rows(patches: &[f64], n_patch: usize, embedding: &Tensor, l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_patch * d];
    gemm(n_patch, l, d, patches, false, embedding.data(), false, &mut out, 0.0);
    out
}

/// Representation and forecast for windows `x: [B, N, L]`.
pub fn backbone_forward(state: &BackboneState, x: &Tensor) -> Result<BackboneOutput> {
    let cfg = &state.config;
    check_inputs("backbone_forward", cfg, x)?;
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let (l, d, p, f) = (cfg.patch_len, cfg.repr_dim, cfg.patches(), cfg.horizon);
    let (mean, std, flagged) = instance_stats(x);
    let patches = normalized_patches(x, &mean, &std);
    let feats = embed_rows(&patches, b * n * p, &state.embedding, l, d);
    let rows = b * n;
    let mut yn = vec![0.0; rows * f];
    gemm(rows, p * d, f, &feats, false, state.head.data(), false, &mut yn, 0.0);
    let mut yhat = yn.clone();
    for r in 0..rows {
        for v in &mut yhat[r * f..(r + 1) * f] {
            *v = mean[r] + std[r] * *v;
        }
    }
    // feats is laid out [B, N, P, d]; the adapter expects [B, P, N, d].
    let repr = Tensor::new(vec![b, n, p, d], feats)?.permute(&[0, 2, 1, 3]);
    let out = BackboneOutput {
        repr,
        yhat_norm: Tensor::new(vec![b, n, f], yn)?,
        yhat: Tensor::new(vec![b, n, f], yhat)?,
        mean: Tensor::new(vec![b, n, 1], mean)?,
        std: Tensor::new(vec![b, n, 1], std)?,
        zero_variance: flagged,
    };
    if !out.yhat.is_finite() || !out.repr.is_finite() {
        return Err(CoraError::NonFinite { op: "backbone_forward" });
    }
    Ok(out)
}

pub fn save_backbone(path: &Path, state: &BackboneState) -> Result<()> {
    let c = &state.config;
    let mut buf = Vec::with_capacity(64 + 8 * (state.embedding.numel() + state.head.numel()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in [c.lookback as u64, c.horizon as u64, c.patch_len as u64, c.repr_dim as u64, c.seed] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&c.ridge.to_le_bytes());
    for v in state.embedding.data().iter().chain(state.head.data()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoraError::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CoraError::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn load_backbone(path: &Path) -> Result<BackboneState> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(8)? != MAGIC {
        return Err(CoraError::Checkpoint(format!("{} is not a backbone checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoraError::Checkpoint(format!("unsupported backbone version {version}")));
    }
    r.u32()?;
    let mut dims = [0usize; 4];
    for v in dims.iter_mut() {
        *v = usize::try_from(r.u64()?).map_err(|_| CoraError::Checkpoint("dimension overflow".into()))?;
    }
    let config = BackboneConfig {
        lookback: dims[0],
        horizon: dims[1],
        patch_len: dims[2],
        repr_dim: dims[3],
        seed: r.u64()?,
        ridge: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| CoraError::Checkpoint(format!("bad header: {e}")))?;
    let (l, d) = (config.patch_len, config.repr_dim);
    let k = config.patches() * d;
    let embedding = Tensor::new(vec![l, d], r.f64s(l * d)?)?;
    let head = Tensor::new(vec![k, config.horizon], r.f64s(k * config.horizon)?)?;
    r.finish()?;
    Ok(BackboneState {
        config,
        embedding,
        head,
    })
}
