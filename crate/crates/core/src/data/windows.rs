use serde::{Deserialize, Serialize};

use super::MultivariateSeries;
use crate::autodiff::Tensor;
use crate::error::{CoraError, Result};

/// Input/target pairs stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, N, L]`.
    pub inputs: Tensor,
    /// `[B, N, F]`.
    pub targets: Tensor,
    /// Series index of each window's first input step.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn empty(n: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            inputs: Tensor::zeros(&[0, n, lookback]),
            targets: Tensor::zeros(&[0, n, horizon]),
            starts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn lookback(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[2]
    }

    /// Windows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (n, l, f) = (self.channels(), self.lookback(), self.horizon());
        let mut inputs = Vec::with_capacity(idx.len() * n * l);
        let mut targets = Vec::with_capacity(idx.len() * n * f);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs.data()[i * n * l..(i + 1) * n * l]);
            targets.extend_from_slice(&self.targets.data()[i * n * f..(i + 1) * n * f]);
        }
        WindowBatch {
            inputs: Tensor::new(vec![idx.len(), n, l], inputs).expect("window select"),
            targets: Tensor::new(vec![idx.len(), n, f], targets).expect("window select"),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
        }
    }

    /// Windows `start..end`.
    pub fn range(&self, start: usize, end: usize) -> WindowBatch {
        self.select(&(start..end).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Fraction of train windows kept, taken from the end of the train region.
    pub few_shot: f64,
    pub stride: usize,
    /// Stride for validation and test windows; `None` uses `stride`.
    pub eval_stride: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            few_shot: 1.0,
            stride: 1,
            eval_stride: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(*f >= 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoraError::Config(format!("split fractions {fr:?} must be >= 0 and sum to 1")));
        }
        if !(self.few_shot > 0.0 && self.few_shot <= 1.0) {
            return Err(CoraError::Config(format!("few-shot fraction {} not in (0, 1]", self.few_shot)));
        }
        if self.stride == 0 || self.eval_stride == Some(0) {
            return Err(CoraError::Config("window stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
    /// Number of train windows before few-shot selection.
    pub train_available: usize,
}

/// Windows of length `lookback + horizon` that fit in `region` steps.
pub fn window_count(region: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    if region < lookback + horizon {
        0
    } else {
        (region - lookback - horizon) / stride + 1
    }
}

fn windows_in(
    series: &MultivariateSeries,
    start: usize,
    end: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> WindowBatch {
    let n = series.channels();
    let count = window_count(end - start, lookback, horizon, stride);
    let mut inputs = Vec::with_capacity(count * n * lookback);
    let mut targets = Vec::with_capacity(count * n * horizon);
    let mut starts = Vec::with_capacity(count);
    for w in 0..count {
        let s = start + w * stride;
        for ch in &series.values {
            inputs.extend_from_slice(&ch[s..s + lookback]);
        }
        for ch in &series.values {
            targets.extend_from_slice(&ch[s + lookback..s + lookback + horizon]);
        }
        starts.push(s);
    }
    WindowBatch {
        inputs: Tensor::new(vec![count, n, lookback], inputs).expect("windows"),
        targets: Tensor::new(vec![count, n, horizon], targets).expect("windows"),
        starts,
    }
}

/// Chronological train/val/test windows. Every window lies wholly inside its
/// region; the region sizes are `floor(T * train)`, `floor(T * val)` and the rest.
pub fn make_windows(series: &MultivariateSeries, spec: &SplitSpec, lookback: usize, horizon: usize) -> Result<Splits> {
    spec.validate()?;
    if lookback == 0 || horizon == 0 {
        return Err(CoraError::Config("lookback and horizon must be positive".into()));
    }
    let t = series.len();
    let n_train = (t as f64 * spec.train + 1e-9).floor() as usize;
    let n_val = ((t as f64 * spec.val + 1e-9).floor() as usize).min(t - n_train);
    let bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, t)];
    let eval_stride = spec.eval_stride.unwrap_or(spec.stride);
    let strides = [spec.stride, eval_stride, eval_stride];
    let fracs = [spec.train, spec.val, spec.test];
    let names = ["train", "val", "test"];
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let (s, e) = bounds[i];
        let w = windows_in(series, s, e, lookback, horizon, strides[i]);
        if fracs[i] > 0.0 && w.is_empty() {
            return Err(CoraError::Data(format!(
                "{} region has {} steps, too short for one window of {} steps",
                names[i],
                e - s,
                lookback + horizon
            )));
        }
        out.push(w);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train_all = out.pop().unwrap();
    let available = train_all.len();
    let keep = ((available as f64 * spec.few_shot).round() as usize).clamp(1.min(available), available);
    let train = train_all.range(available - keep, available);
    Ok(Splits {
        train,
        val,
        test,
        train_available: available,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::channel_names;

    fn ramp(n: usize, t: usize) -> MultivariateSeries {
        let values = (0..n).map(|c| (0..t).map(|i| (c * 10_000 + i) as f64).collect()).collect();
        MultivariateSeries::new(channel_names(n), values).unwrap()
    }

    #[test]
    fn single_window_boundary() {
        let s = ramp(2, 12);
        let spec = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            ..SplitSpec::default()
        };
        let sp = make_windows(&s, &spec, 8, 4).unwrap();
        assert_eq!(sp.train.len(), 1);
        assert!(sp.val.is_empty() && sp.test.is_empty());
        assert_eq!(sp.train.targets.get(&[0, 1, 0]), 10_008.0);
    }

    #[test]
    fn stride_counting() {
        let s = ramp(1, 1000);
        let spec = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            stride: 24,
            ..SplitSpec::default()
        };
        let sp = make_windows(&s, &spec, 96, 24).unwrap();
        assert_eq!(sp.train.len(), (1000 - 96 - 24) / 24 + 1);
        for w in sp.train.starts.windows(2) {
            assert_eq!(w[1] - w[0], 24);
        }
    }

    #[test]
    fn few_shot_takes_last_windows() {
        let s = ramp(1, 1000 + 9);
        let spec = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            few_shot: 0.05,
            ..SplitSpec::default()
        };
        let sp = make_windows(&s, &spec, 6, 4).unwrap();
        assert_eq!(sp.train_available, 1000);
        assert_eq!(sp.train.len(), 50);
        assert_eq!(sp.train.starts, (950..1000).collect::<Vec<_>>());
    }

    #[test]
    fn splits_are_disjoint_and_ordered() {
        let s = ramp(1, 500);
        let sp = make_windows(&s, &SplitSpec::default(), 20, 10).unwrap();
        let last_train = sp.train.starts.last().unwrap() + 30;
        assert!(last_train <= 350);
        assert!(sp.val.starts[0] >= 350 && sp.val.starts.last().unwrap() + 30 <= 400);
        assert!(sp.test.starts[0] >= 400 && sp.test.starts.last().unwrap() + 30 <= 500);
    }

    #[test]
    fn too_short_region_is_an_error() {
        let s = ramp(1, 100);
        assert!(matches!(
            make_windows(&s, &SplitSpec::default(), 20, 10),
            Err(CoraError::Data(_))
        ));
        let bad = SplitSpec {
            train: 0.5,
            ..SplitSpec::default()
        };
        assert!(matches!(make_windows(&s, &bad, 2, 1), Err(CoraError::Config(_))));
    }
}
