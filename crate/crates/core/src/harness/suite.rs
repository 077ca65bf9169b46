//! Planted-correlation regimes and the pretraining corpus used by the
//! end-to-end experiments.

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone, BackboneConfig, BackboneState};
use crate::data::{
    block_correlation, generate_synthetic, make_windows, pretraining_series, signed_rank_one, MultivariateSeries,
    PlantedStructure, SplitSpec, WindowBatch,
};
use crate::error::{CoraError, Result};

/// Observation noise added on top of the filtered innovations.
pub const SUITE_NOISE: f64 = 0.1;
/// Segment length of the dynamic regime.
pub const DYNAMIC_SEGMENT: usize = 512;
/// Planted strength of the correlated groups.
pub const PLANTED_RHO: f64 = 0.8;
/// Threshold below which a pair counts as uncorrelated.
pub const PARTIAL_EPS: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Segments alternate between an all-positive and a sign-alternating pattern.
    Dynamic,
    /// One positive and one negative group, anticorrelated with each other.
    Heterogeneous,
    /// The first half of the channels correlate; the rest are independent.
    Partial,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Dynamic, Regime::Heterogeneous, Regime::Partial];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Dynamic => "dynamic",
            Regime::Heterogeneous => "heterogeneous",
            Regime::Partial => "partial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| CoraError::Config(format!("unknown regime `{s}` (dynamic, heterogeneous, partial)")))
    }

    /// Planted structure for `n >= 4` channels over `t_total` steps.
    pub fn structure(self, n: usize, t_total: usize) -> Result<PlantedStructure> {
        if n < 4 {
            return Err(CoraError::Config(format!("planted regimes need at least 4 channels, got {n}")));
        }
        let half = n / 2;
        match self {
            Regime::Dynamic => {
                let alternating: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
                PlantedStructure::new(
                    DYNAMIC_SEGMENT,
                    vec![signed_rank_one(&vec![1.0; n], PLANTED_RHO), signed_rank_one(&alternating, PLANTED_RHO)],
                    PARTIAL_EPS,
                )
            }
            Regime::Heterogeneous => {
                let signs: Vec<f64> = (0..n).map(|i| if i < half { 1.0 } else { -1.0 }).collect();
                PlantedStructure::new(t_total, vec![signed_rank_one(&signs, PLANTED_RHO)], PARTIAL_EPS)
            }
            Regime::Partial => {
                let block: Vec<usize> = (0..half).collect();
                PlantedStructure::new(t_total, vec![block_correlation(n, &block, PLANTED_RHO)], PARTIAL_EPS)
            }
        }
    }

    pub fn generate(self, n: usize, t_total: usize, seed: u64) -> Result<(MultivariateSeries, PlantedStructure)> {
        generate_synthetic(&self.structure(n, t_total)?, t_total, SUITE_NOISE, seed)
    }
}

/// Windows of the pretraining corpus: 16 independent channels, 8192 steps, stride 4.
pub fn pretraining_corpus(config: &BackboneConfig, seed: u64) -> Result<WindowBatch> {
    let series = pretraining_series(16, 8192, seed)?;
    let spec = SplitSpec {
        train: 1.0,
        val: 0.0,
        test: 0.0,
        stride: 4,
        ..SplitSpec::default()
    };
    Ok(make_windows(&series, &spec, config.lookback, config.horizon)?.train)
}

/// Backbone pretrained on [`pretraining_corpus`].
pub fn pretrained_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneState> {
    Ok(pretrain_backbone(&pretraining_corpus(config, seed)?, config)?.0)
}
