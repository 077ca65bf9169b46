use std::fmt::Write as _;

use crate::adapter::{DceMode, HdMode};
use crate::backbone::BackboneState;
use crate::data::Splits;
use crate::error::{CoraError, Result};

use super::config::TrainConfig;
use super::evaluate::evaluate_backbone;
use super::fit::{fit, FitOutput};

/// The five comparison rows: backbone alone, then the adapter with naive
/// stand-ins swapped back one at a time.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(usize, &'static str, Option<TrainConfig>)> {
    let with = |dce, hd| TrainConfig {
        dce,
        hd,
        hpcl: true,
        ..base.clone()
    };
    vec![
        (1, "backbone", None),
        (2, "pearson+single", Some(with(DceMode::PearsonOnly, HdMode::SingleBranch))),
        (3, "pearson+dual", Some(with(DceMode::PearsonOnly, HdMode::Dual))),
        (4, "dce+single", Some(with(DceMode::Full, HdMode::SingleBranch))),
        (5, "full", Some(with(DceMode::Full, HdMode::Dual))),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub row: usize,
    pub name: &'static str,
    pub seeds: Vec<u64>,
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    /// One fit per seed; empty for the backbone row.
    pub fits: Vec<FitOutput>,
}

impl AblationRow {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    pub fn mean_mae(&self) -> f64 {
        self.mae.iter().sum::<f64>() / self.mae.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, row: usize) -> &AblationRow {
        self.rows.iter().find(|r| r.row == row).expect("ablation row")
    }

    /// `row,name,seed,test_mse,test_mae`, plus one `mean` line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,name,seed,test_mse,test_mae\n");
        for r in &self.rows {
            for ((seed, mse), mae) in r.seeds.iter().zip(&r.mse).zip(&r.mae) {
                let _ = writeln!(s, "{},{},{},{:.16e},{:.16e}", r.row, r.name, seed, mse, mae);
            }
            let _ = writeln!(s, "{},{},mean,{:.16e},{:.16e}", r.row, r.name, r.mean_mse(), r.mean_mae());
        }
        s
    }

    /// Full adapter best, rows 2 to 4 between the backbone and the full
    /// adapter, each comparison allowed a relative slack of `guard`.
    pub fn ordering_holds(&self, guard: f64) -> bool {
        let (first, last) = (self.row(1).mean_mse(), self.row(5).mean_mse());
        let best = self.rows.iter().all(|r| last <= r.mean_mse() * (1.0 + guard));
        let between = (2..=4).all(|i| {
            let m = self.row(i).mean_mse();
            m <= first * (1.0 + guard) && m >= last * (1.0 - guard)
        });
        best && between
    }
}

/// Fit and evaluate every row on the test split with shared seeds.
pub fn ablate(base: &TrainConfig, splits: &Splits, backbone: &BackboneState, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(CoraError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (row, name, cfg) in ablation_rows(base) {
        let mut r = AblationRow {
            row,
            name,
            seeds: seeds.to_vec(),
            mse: Vec::new(),
            mae: Vec::new(),
            fits: Vec::new(),
        };
        match cfg {
            None => {
                let m = evaluate_backbone(backbone, &splits.test)?;
                r.mse = vec![m.mse; seeds.len()];
                r.mae = vec![m.mae; seeds.len()];
            }
            Some(cfg) => {
                for &seed in seeds {
                    let out = fit(&TrainConfig { seed, ..cfg.clone() }, splits, backbone)?;
                    let t = out
                        .report
                        .test
                        .ok_or_else(|| CoraError::Data("ablation needs a test split".into()))?;
                    r.mse.push(t.mse);
                    r.mae.push(t.mae);
                    r.fits.push(out);
                }
            }
        }
        rows.push(r);
    }
    Ok(AblationTable { rows })
}
