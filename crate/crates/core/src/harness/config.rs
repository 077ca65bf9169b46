use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, DceMode, HdMode};
use crate::backbone::BackboneConfig;
use crate::data::SplitSpec;
use crate::error::{CoraError, Result};
use crate::hpcl::HpclConfig;

/// Every knob of a run, read from one flat `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // optimizer and schedule
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,

    // ablation switches
    pub dce: DceMode,
    pub hd: HdMode,
    pub hpcl: bool,
    /// Fix the fusion gate to this value for every channel.
    pub fixed_gate: Option<f64>,

    // adapter
    pub degree: usize,
    /// 0 picks the rank from the channel count.
    pub rank: usize,
    pub expansion: usize,
    pub hd_layers: usize,
    pub fusion_layers: usize,
    pub symmetrize: bool,
    /// Clip the estimated correlation to [-1, 1].
    pub bound_correlation: bool,
    pub lambda_aux: f64,
    pub tau: f64,
    pub eps_init: f64,
    pub soft_gate: bool,
    pub binarize: bool,

    // backbone
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub repr_dim: usize,
    pub ridge: f64,

    // splits
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub few_shot: f64,
    pub stride: usize,
    /// 0 reuses `stride`.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = HpclConfig::default();
        let b = BackboneConfig::default();
        let s = SplitSpec::default();
        Self {
            lr: 1e-3,
            epochs: 50,
            patience: 10,
            batch_size: 32,
            warmup_epochs: 5,
            seed: 0,
            dce: DceMode::Full,
            hd: HdMode::Dual,
            hpcl: true,
            fixed_gate: None,
            degree: 3,
            rank: 0,
            expansion: 8,
            hd_layers: 3,
            fusion_layers: 3,
            symmetrize: false,
            bound_correlation: true,
            lambda_aux: h.lambda_aux,
            tau: h.tau,
            eps_init: h.eps_init,
            soft_gate: h.soft_gate,
            binarize: h.binarize,
            lookback: b.lookback,
            horizon: b.horizon,
            patch_len: b.patch_len,
            repr_dim: b.repr_dim,
            ridge: b.ridge,
            train_frac: s.train,
            val_frac: s.val,
            test_frac: s.test,
            few_shot: s.few_shot,
            stride: s.stride,
            eval_stride: 0,
        }
    }
}

impl TrainConfig {
    /// Parse a config file, then apply `key=value` overrides. Values are read
    /// as TOML scalars; anything that does not parse is taken as a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CoraError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CoraError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CoraError::Config(format!("override `{o}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: TrainConfig = table.try_into().map_err(|e| CoraError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoraError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Some(b) = self.fixed_gate {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("fixed_gate {b} not in [0, 1]"));
            }
        }
        if !(self.lambda_aux >= 0.0) {
            return bad(format!("lambda_aux must be >= 0, got {}", self.lambda_aux));
        }
        self.backbone().validate()?;
        self.split().validate()?;
        self.hpcl_config().validate()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch_len: self.patch_len,
            repr_dim: self.repr_dim,
            seed: self.seed,
            ridge: self.ridge,
        }
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train: self.train_frac,
            val: self.val_frac,
            test: self.test_frac,
            few_shot: self.few_shot,
            stride: self.stride,
            eval_stride: (self.eval_stride > 0).then_some(self.eval_stride),
        }
    }

    pub fn hpcl_config(&self) -> HpclConfig {
        HpclConfig {
            eps_init: self.eps_init,
            tau: self.tau,
            lambda_aux: self.lambda_aux,
            soft_gate: self.soft_gate,
            binarize: self.binarize,
        }
    }

    /// Adapter shape for `channels` channels on top of `backbone`.
    pub fn adapter(&self, channels: usize, backbone: &BackboneConfig) -> AdapterConfig {
        let mut a = AdapterConfig::new(channels, backbone.patches(), backbone.repr_dim, backbone.horizon);
        a.degree = self.degree;
        a.rank = (self.rank > 0).then_some(self.rank);
        a.expansion = self.expansion;
        a.hd_depth = self.hd_layers;
        a.fusion_depth = self.fusion_layers;
        a.dce = self.dce;
        a.hd = self.hd;
        a.use_hpcl = self.hpcl;
        a.symmetrize = self.symmetrize;
        a.bound_correlation = self.bound_correlation;
        a.fixed_gate = self.fixed_gate;
        a.hpcl = self.hpcl_config();
        a
    }
}
