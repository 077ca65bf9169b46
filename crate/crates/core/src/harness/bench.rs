use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward, mse_loss, AdapterConfig, AdapterState, BatchInputs, ForwardOptions};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::{backbone_forward, BackboneConfig, BackboneState};
use crate::dce::pearson_batch;
use crate::error::{CoraError, Result};
use crate::infer::{block_windows, InferenceModel, Real};
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Pearson matrices, graph forward with the contrastive loss, backward and one Adam step.
    TrainStep,
    /// Backbone forward plus division and fusion, no correlation work.
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub channels: Vec<usize>,
    pub reps: usize,
    /// Windows per training step.
    pub batch: usize,
    /// Windows per timed inference pass.
    pub inference_batch: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub repr_dim: usize,
    pub layers: usize,
    /// Precision of the inference path; training is always 64-bit.
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 32, 128, 512],
            reps: 20,
            batch: 32,
            inference_batch: 256,
            lookback: 96,
            horizon: 96,
            patch_len: 16,
            repr_dim: 4,
            layers: 1,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 4 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoraError::Config("bench needs at least 4 ascending channel counts".into()));
        }
        if self.channels[0] < 2 || self.reps == 0 || self.batch == 0 || self.inference_batch == 0 {
            return Err(CoraError::Config("channels >= 2, reps >= 1 and batch >= 1 required".into()));
        }
        Ok(())
    }

    fn backbone(&self) -> Result<BackboneState> {
        let config = BackboneConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            patch_len: self.patch_len,
            repr_dim: self.repr_dim,
            seed: self.seed,
            ridge: 1e-3,
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let embedding = Tensor::randn(&[self.patch_len, self.repr_dim], 0.3, &mut rng);
        let head = Tensor::randn(&[config.patches() * self.repr_dim, self.horizon], 0.1, &mut rng);
        Ok(BackboneState {
            config,
            embedding,
            head,
        })
    }

    fn adapter(&self, n: usize, backbone: &BackboneConfig) -> Result<AdapterState> {
        let mut c = AdapterConfig::new(n, backbone.patches(), self.repr_dim, self.horizon);
        c.hd_depth = self.layers;
        c.fusion_depth = self.layers;
        AdapterState::new(c, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub channels: usize,
    pub median_secs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(time)` against `ln(N)`.
    pub slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channels,median_seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9}", r.channels, r.median_secs);
        }
        s
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?; // warm caches and allocator
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Times one pass over every window of `x`, in the same blocks `evaluate` uses.
fn inference_time<T: Real>(reps: usize, adapter: &AdapterState, backbone: &BackboneState, x: &Tensor) -> Result<f64> {
    let model = InferenceModel::<T>::new(adapter);
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let k = block_windows(n);
    let blocks: Vec<Tensor> = (0..b)
        .step_by(k)
        .map(|s| x.take_rows(&(s..(s + k).min(b)).collect::<Vec<_>>()))
        .collect();
    time_reps(reps, || {
        for xb in &blocks {
            let out = backbone_forward(backbone, xb)?;
            let repr: Vec<T> = out.repr.data().iter().map(|&v| T::of(v)).collect();
            let yhat: Vec<T> = out.yhat_norm.data().iter().map(|&v| T::of(v)).collect();
            std::hint::black_box(model.predict_norm(&repr, &yhat, xb.shape()[0])?);
        }
        Ok(())
    })
}

/// Median wall time per channel count and the fitted log-log slope.
pub fn bench(config: &BenchConfig, mode: BenchMode) -> Result<BenchReport> {
    config.validate()?;
    let backbone = config.backbone()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xbe4c);
    let mut rows = Vec::new();
    for &n in &config.channels {
        let batch = match mode {
            BenchMode::TrainStep => config.batch,
            BenchMode::Inference => config.inference_batch,
        };
        let x = Tensor::randn(&[batch, n, config.lookback], 1.0, &mut rng);
        let mut adapter = config.adapter(n, &backbone.config)?;
        let secs = match mode {
            BenchMode::Inference => match config.precision {
                Precision::F32 => inference_time::<f32>(config.reps, &adapter, &backbone, &x)?,
                Precision::F64 => inference_time::<f64>(config.reps, &adapter, &backbone, &x)?,
            },
            BenchMode::TrainStep => {
                let out = backbone_forward(&backbone, &x)?;
                let targets = Tensor::randn(&[batch, n, config.horizon], 1.0, &mut rng);
                let mut adam = Adam::new(&adapter.store, 1e-4);
                time_reps(config.reps, || {
                    let pearson = pearson_batch(&x)?.values;
                    let inputs = BatchInputs {
                        repr: &out.repr,
                        yhat_norm: &out.yhat_norm,
                        mean: &out.mean,
                        std: &out.std,
                        pearson: Some(&pearson),
                    };
                    let g = Graph::new();
                    let p = adapter.store.bind(&g);
                    let o = forward(&g, &p, &adapter, &inputs, ForwardOptions::default())?;
                    let mse = mse_loss(&g, o.forecast, &targets)?;
                    let aux = o.aux.expect("contrastive loss enabled").total;
                    let loss = g.add(mse, aux)?;
                    let grads = g.backward(loss)?;
                    adam.step(&mut adapter.store, &p, &grads);
                    Ok(())
                })?
            }
        };
        rows.push(BenchRow {
            channels: n,
            median_secs: secs,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.channels as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.median_secs.max(1e-12).ln()).collect();
    Ok(BenchReport {
        mode,
        slope: least_squares_slope(&lx, &ly),
        rows,
    })
}
