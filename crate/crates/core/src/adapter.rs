//! The full adapter: correlation estimation, division, contrastive masks and
//! fusion, assembled over one parameter store.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! 8 bytes   magic "CORA-AD\0"
//! u32       format version (1)
//! u32       reserved, 0
//! u64 + n   JSON-encoded AdapterConfig (length, then UTF-8 bytes)
//! u64       number of parameter tensors
//! per tensor:
//!   u64 + n   name
//!   u64       rank, then u64 per dimension
//!   f64 x numel  values, row-major
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::Reader;
use crate::dce::{compose_correlation, default_rank, time_invariant_component, time_varying_component, DceParams};
use crate::division::{divide, HdParams};
use crate::error::{CoraError, Result};
use crate::fusion::{fuse_predict, FusionParams, Gate};
use crate::hpcl::{aux_loss, softplus_inverse, threshold_masks, AuxLoss, HpclConfig, MaskPair};
use crate::io::write_atomic;
use crate::params::{Bound, ParamId, ParamStore};

const MAGIC: &[u8; 8] = b"CORA-AD\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DceMode {
    /// Pearson plus the learnable low-rank term.
    Full,
    /// Pearson statistics only.
    PearsonOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HdMode {
    Dual,
    /// One shared projection stack for both spaces.
    SingleBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub channels: usize,
    pub patches: usize,
    pub repr_dim: usize,
    pub horizon: usize,
    pub degree: usize,
    /// `None` picks [`default_rank`].
    pub rank: Option<usize>,
    pub expansion: usize,
    pub hd_depth: usize,
    pub fusion_depth: usize,
    pub dce: DceMode,
    pub hd: HdMode,
    pub use_hpcl: bool,
    pub symmetrize: bool,
    /// Clip the estimated correlation to `[-1, 1]`.
    #[serde(default = "default_true")]
    pub bound_correlation: bool,
    /// Fixed fusion gate for every channel, overriding the learned one.
    #[serde(default)]
    pub fixed_gate: Option<f64>,
    pub hpcl: HpclConfig,
}

impl AdapterConfig {
    pub fn new(channels: usize, patches: usize, repr_dim: usize, horizon: usize) -> Self {
        Self {
            channels,
            patches,
            repr_dim,
            horizon,
            degree: 3,
            rank: None,
            expansion: 8,
            hd_depth: 3,
            fusion_depth: 3,
            dce: DceMode::Full,
            hd: HdMode::Dual,
            use_hpcl: true,
            symmetrize: false,
            bound_correlation: true,
            fixed_gate: None,
            hpcl: HpclConfig::default(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or_else(|| default_rank(self.channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.patches == 0 || self.repr_dim == 0 || self.horizon == 0 {
            return Err(CoraError::Config("adapter dimensions must be positive".into()));
        }
        if self.rank() == 0 || self.expansion == 0 {
            return Err(CoraError::Config("rank and expansion must be positive".into()));
        }
        self.hpcl.validate()
    }

    /// True when the low-rank correlation term is built and trained.
    pub fn learns_correlation(&self) -> bool {
        self.use_hpcl && self.dce == DceMode::Full
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub store: ParamStore,
    pub dce: Option<DceParams>,
    pub hd: HdParams,
    pub eps_raw: ParamId,
    pub fusion: FusionParams,
}

impl AdapterState {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let dce = if c.learns_correlation() {
            Some(DceParams::new(&mut store, c.channels, c.repr_dim, c.degree, c.rank(), c.expansion, &mut rng)?)
        } else {
            None
        };
        let shared = c.hd == HdMode::SingleBranch;
        let hd = HdParams::new(&mut store, "hd", c.hd_depth, c.patches, c.repr_dim, shared, &mut rng);
        let eps_raw = store.add(
            "hpcl.eps_raw",
            Tensor::scalar(softplus_inverse(c.hpcl.eps_init)),
            c.hpcl.soft_gate && c.use_hpcl,
        );
        let fusion = FusionParams::new(
            &mut store,
            c.fusion_depth,
            c.patches,
            c.repr_dim,
            c.channels,
            c.horizon,
            shared,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            dce,
            hd,
            eps_raw,
            fusion,
        })
    }

    /// Current threshold `softplus(eps_raw)`.
    pub fn eps(&self) -> f64 {
        let r = self.store.get(self.eps_raw).item();
        if r > 30.0 {
            r
        } else {
            r.exp().ln_1p()
        }
    }
}

/// Constant inputs for one batch, all taken from the frozen backbone and the raw windows.
#[derive(Clone, Copy, Debug)]
pub struct BatchInputs<'a> {
    /// `[B, P, N, d]`.
    pub repr: &'a Tensor,
    /// `[B, N, F]`, normalized space.
    pub yhat_norm: &'a Tensor,
    /// `[B, N, 1]` instance mean and floored std.
    pub mean: &'a Tensor,
    pub std: &'a Tensor,
    /// `[B, N, N]` Pearson matrices of the raw input windows; needed only with HPCL.
    pub pearson: Option<&'a Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Ignored when the configuration fixes the gate.
    pub gate: Gate,
    pub with_aux: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            gate: Gate::Learned,
            with_aux: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub x_pos: Var,
    pub x_neg: Var,
    pub corr: Option<Var>,
    pub masks: Option<MaskPair>,
    pub aux: Option<AuxLoss>,
    /// Normalized-space forecast `[B, N, F]`.
    pub forecast_norm: Var,
    /// Raw-space forecast `[B, N, F]`.
    pub forecast: Var,
}

fn default_true() -> bool {
    true
}

/// `min(max(x, -1), 1)` from two relus, so the kinks are visible to gradient checks.
fn clip_unit(g: &Graph, x: Var) -> Result<Var> {
    let above = g.relu(g.add_scalar(x, -1.0)?)?;
    let below = g.relu(g.add_scalar(g.scale(x, -1.0)?, -1.0)?)?;
    g.add(g.sub(x, above)?, below)
}

/// Estimated correlation `R + Q V Qᵀ` (or `R` alone without the learnable term),
/// clipped to `[-1, 1]` when `bound_correlation` is set.
///
/// Unclipped, the contrastive loss can be lowered without limit by inflating
/// the retained pair weights, and the learnable term grows until every pair
/// clears the threshold.
pub fn correlation(g: &Graph, p: &Bound, state: &AdapterState, repr: Var, pearson: Var) -> Result<Var> {
    match &state.dce {
        Some(dce) => {
            let q = time_varying_component(g, p, dce, repr)?;
            let v = time_invariant_component(g, p, dce)?;
            let m = compose_correlation(g, pearson, q, v, state.config.symmetrize)?;
            if state.config.bound_correlation {
                clip_unit(g, m)
            } else {
                Ok(m)
            }
        }
        None => Ok(pearson),
    }
}

pub fn forward(g: &Graph, p: &Bound, state: &AdapterState, inputs: &BatchInputs, opts: ForwardOptions) -> Result<ForwardOutput> {
    let c = &state.config;
    let rs = inputs.repr.shape();
    if rs.len() != 4 || rs[1] != c.patches || rs[2] != c.channels || rs[3] != c.repr_dim {
        return Err(CoraError::shape(
            "adapter forward",
            format!(
                "repr {rs:?} vs adapter [B, {}, {}, {}]",
                c.patches, c.channels, c.repr_dim
            ),
        ));
    }
    let repr = g.constant(inputs.repr.clone());
    let (x_pos, x_neg) = divide(g, p, &state.hd, repr)?;

    let (mut corr, mut masks, mut aux) = (None, None, None);
    if opts.with_aux && c.use_hpcl {
        let pearson = inputs
            .pearson
            .ok_or_else(|| CoraError::Config("contrastive training needs Pearson matrices".into()))?;
        let r = g.constant(pearson.clone());
        let m = correlation(g, p, state, repr, r)?;
        let eps = g.softplus(p.var(state.eps_raw))?;
        let mp = threshold_masks(g, m, eps, &c.hpcl)?;
        aux = Some(aux_loss(g, x_pos, x_neg, &mp, &c.hpcl)?);
        corr = Some(m);
        masks = Some(mp);
    }

    let yhat = g.constant(inputs.yhat_norm.clone());
    let gate = c.fixed_gate.map_or(opts.gate, Gate::Fixed);
    let fused = fuse_predict(g, p, &state.fusion, x_pos, x_neg, yhat, gate)?;
    let scaled = g.mul(fused.forecast, g.constant(inputs.std.clone()))?;
    let forecast = g.add(scaled, g.constant(inputs.mean.clone()))?;
    Ok(ForwardOutput {
        x_pos,
        x_neg,
        corr,
        masks,
        aux,
        forecast_norm: fused.forecast,
        forecast,
    })
}

/// Mean squared error between `pred` and a constant target.
pub fn mse_loss(g: &Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader) -> Result<String> {
    let n = r.u64()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CoraError::Checkpoint("invalid UTF-8".into()))
}

pub fn save_adapter(path: &Path, state: &AdapterState) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    put_str(&mut buf, &serde_json::to_string(&state.config)?);
    buf.extend_from_slice(&(state.store.len() as u64).to_le_bytes());
    for e in state.store.entries() {
        put_str(&mut buf, &e.name);
        buf.extend_from_slice(&(e.value.ndim() as u64).to_le_bytes());
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn load_adapter(path: &Path) -> Result<AdapterState> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(8)? != MAGIC {
        return Err(CoraError::Checkpoint(format!("{} is not an adapter checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CoraError::Checkpoint(format!("unsupported adapter version {version}")));
    }
    r.u32()?;
    let config: AdapterConfig = serde_json::from_str(&get_str(&mut r)?)
        .map_err(|e| CoraError::Checkpoint(format!("bad adapter config: {e}")))?;
    let mut state = AdapterState::new(config, 0).map_err(|e| CoraError::Checkpoint(e.to_string()))?;
    let count = r.u64()? as usize;
    if count != state.store.len() {
        return Err(CoraError::Checkpoint(format!(
            "{count} tensors stored, configuration needs {}",
            state.store.len()
        )));
    }
    for e in state.store.entries_mut() {
        let name = get_str(&mut r)?;
        let rank = r.u64()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<_>>()?;
        if name != e.name || shape != e.value.shape() {
            return Err(CoraError::Checkpoint(format!(
                "tensor `{name}` {shape:?} does not match `{}` {:?}",
                e.name,
                e.value.shape()
            )));
        }
        let n = e.value.numel();
        e.value = Tensor::new(shape, r.f64s(n)?)?;
    }
    r.finish()?;
    Ok(state)
}
