use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

impl EvalMetrics {
    /// Raw-space errors over every window, channel and horizon step.
    pub fn from_slices(pred: &[f64], target: &[f64], windows: usize) -> Self {
        assert_eq!(pred.len(), target.len());
        let n = pred.len().max(1) as f64;
        let (mut se, mut ae) = (0.0, 0.0);
        for (p, t) in pred.iter().zip(target) {
            let d = p - t;
            se += d * d;
            ae += d.abs();
        }
        Self {
            mse: se / n,
            mae: ae / n,
            windows,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_aux: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept; `None` means the initial parameters.
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub test: Option<EvalMetrics>,
    pub backbone_params: usize,
    pub adapter_params: usize,
    /// Epoch at which a non-finite loss or parameter appeared.
    pub diverged: Option<usize>,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsReport {
    /// Per-epoch table. Wall-clock time is left out so that repeated runs compare equal.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,l_pos,l_neg,l_aux,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch,
                num(e.train_mse),
                num(e.l_pos),
                num(e.l_neg),
                num(e.l_aux),
                num(e.val_mse)
            );
        }
        s
    }

    /// `key,value` rows for the run as a whole.
    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |e| e.to_string());
        let mut s = String::from("key,value\n");
        let _ = writeln!(s, "best_epoch,{}", opt(self.best_epoch));
        let _ = writeln!(s, "best_val_mse,{}", num(self.best_val_mse));
        if let Some(t) = self.test {
            let _ = writeln!(s, "test_mse,{}", num(t.mse));
            let _ = writeln!(s, "test_mae,{}", num(t.mae));
            let _ = writeln!(s, "test_windows,{}", t.windows);
        }
        let _ = writeln!(s, "backbone_params,{}", self.backbone_params);
        let _ = writeln!(s, "adapter_params,{}", self.adapter_params);
        let _ = writeln!(s, "diverged_epoch,{}", opt(self.diverged));
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6}", e.epoch, e.seconds);
        }
        s
    }

    /// Write `metrics.csv`, `summary.csv` and `timing.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("metrics.csv"), self.epochs_csv().as_bytes())?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_atomic(&dir.join("timing.csv"), self.timing_csv().as_bytes())
    }
}
