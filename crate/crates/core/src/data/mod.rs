//! Series containers, synthetic generators with planted correlation
//! structure, CSV ingestion and window construction.

mod csv_io;
mod regime;
mod synth;
mod windows;

pub use csv_io::{load_csv, write_csv, CsvSchema};
pub use regime::{effective_sample_size, verify_regime, RegimeReport};
pub use synth::{
    block_correlation, generate_synthetic, generate_with_filters, pretraining_series, read_truth,
    signed_rank_one, write_truth, FilterSpec, PlantedStructure, RegimeTags, SegmentSpan, TruthFile,
};
pub use windows::{make_windows, window_count, SplitSpec, Splits, WindowBatch};

use crate::error::{CoraError, Result};

/// An `N`-channel series stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub names: Vec<String>,
    /// `values[n][t]`.
    pub values: Vec<Vec<f64>>,
    pub timestamps: Option<Vec<String>>,
    pub freq: Option<String>,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self {
            names,
            values,
            timestamps: None,
            freq: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.values.len() {
            return Err(CoraError::Data(format!(
                "{} channel names for {} channels",
                self.names.len(),
                self.values.len()
            )));
        }
        let t = self.len();
        for (name, v) in self.names.iter().zip(&self.values) {
            if v.len() != t {
                return Err(CoraError::Data(format!("channel `{name}` has {} steps, expected {t}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(CoraError::Data(format!("channel `{name}` has a non-finite value at step {i}")));
            }
        }
        if let Some(ts) = &self.timestamps {
            if ts.len() != t {
                return Err(CoraError::Data(format!("{} timestamps for {t} steps", ts.len())));
            }
        }
        Ok(())
    }

    /// Steps `start..end` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> MultivariateSeries {
        MultivariateSeries {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v[start..end].to_vec()).collect(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            freq: self.freq.clone(),
        }
    }
}

/// Default channel names `ch0, ch1, ...`.
pub fn channel_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ch{i}")).collect()
}
