use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{forward, mse_loss, AdapterState, BatchInputs, DceMode, ForwardOptions};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::{backbone_forward, BackboneOutput, BackboneState};
use crate::data::{Splits, WindowBatch};
use crate::dce::{pearson_batch, pearson_matrix};
use crate::error::{CoraError, Result};
use crate::infer::InferenceModel;
use crate::optim::Adam;
use crate::params::ParamStore;

use super::config::TrainConfig;
use super::evaluate::{evaluate, predict_prepared};
use super::metrics::{EpochMetrics, EvalMetrics, MetricsReport};

/// Stream offset separating the shuffling RNG from the initialization RNG.
const SHUFFLE_STREAM: u64 = 0x5_4ff1e;

#[derive(Clone, Debug)]
pub struct FitOutput {
    /// Parameters with the best validation MSE (or the last finite ones after divergence).
    pub adapter: AdapterState,
    pub report: MetricsReport,
}

impl FitOutput {
    pub fn diverged(&self) -> bool {
        self.report.diverged.is_some()
    }
}

/// Backbone outputs for a split, computed once since the backbone is frozen.
struct Prepared {
    out: BackboneOutput,
    targets: Tensor,
    pearson: Option<Tensor>,
}

/// Pearson matrix `[N, N]` over every input step of `w`, the series-level
/// statistic that stands in for the dynamic estimate in the ablations.
pub fn series_pearson(w: &WindowBatch) -> Result<Tensor> {
    let (b, n, l) = (w.len(), w.channels(), w.lookback());
    let per_channel = w.inputs.permute(&[1, 0, 2]).reshape(&[n, b * l])?;
    Ok(pearson_matrix(&per_channel)?.values)
}

impl Prepared {
    fn new(backbone: &BackboneState, w: &WindowBatch, pearson: Option<DceMode>) -> Result<Self> {
        let pearson = match pearson {
            Some(DceMode::Full) => Some(pearson_batch(&w.inputs)?.values),
            Some(DceMode::PearsonOnly) => {
                let r = series_pearson(w)?;
                let n = w.channels();
                Some(Tensor::from_fn(&[w.len(), n, n], |ix| r.get(&ix[1..])))
            }
            None => None,
        };
        Ok(Self {
            out: backbone_forward(backbone, &w.inputs)?,
            targets: w.targets.clone(),
            pearson,
        })
    }

    fn mse(&self, state: &AdapterState) -> Result<f64> {
        let model = InferenceModel::<f64>::new(state);
        let pred = predict_prepared(&model, &self.out)?;
        Ok(EvalMetrics::from_slices(pred.data(), self.targets.data(), self.targets.shape()[0]).mse)
    }
}

struct StepStats {
    mse: f64,
    l_pos: f64,
    l_neg: f64,
    l_aux: f64,
}

fn train_step(
    state: &mut AdapterState,
    adam: &mut Adam,
    data: &Prepared,
    idx: &[usize],
    lambda: f64,
) -> Result<StepStats> {
    let o = &data.out;
    let (repr, yhat, mean, std) = (
        o.repr.take_rows(idx),
        o.yhat_norm.take_rows(idx),
        o.mean.take_rows(idx),
        o.std.take_rows(idx),
    );
    let pearson = data.pearson.as_ref().map(|p| p.take_rows(idx));
    let targets = data.targets.take_rows(idx);
    let inputs = BatchInputs {
        repr: &repr,
        yhat_norm: &yhat,
        mean: &mean,
        std: &std,
        pearson: pearson.as_ref(),
    };
    let g = Graph::new();
    let p = state.store.bind(&g);
    let out = forward(&g, &p, state, &inputs, ForwardOptions::default())?;
    let mse = mse_loss(&g, out.forecast, &targets)?;
    let loss = match out.aux {
        Some(aux) if lambda > 0.0 => {
            let weighted = g.scale(aux.total, lambda)?;
            g.add(mse, weighted)?
        }
        _ => mse,
    };
    let stats = StepStats {
        mse: g.value(mse).item(),
        l_pos: out.aux.map_or(0.0, |a| g.value(a.pos).item()),
        l_neg: out.aux.map_or(0.0, |a| g.value(a.neg).item()),
        l_aux: out.aux.map_or(0.0, |a| g.value(a.total).item()),
    };
    if !g.value(loss).item().is_finite() {
        return Err(CoraError::NonFinite { op: "training loss" });
    }
    let grads = g.backward(loss)?;
    adam.step(&mut state.store, &p, &grads);
    if !state.store.all_finite() {
        return Err(CoraError::NonFinite { op: "parameter update" });
    }
    Ok(stats)
}

/// Train a fresh adapter on `splits.train` on top of the frozen `backbone`.
///
/// With `dce = pearson-only` the contrastive masks come from one Pearson
/// matrix over the whole few-shot train split instead of per-window estimates.
///
/// Minimizes raw-space MSE plus `lambda_aux` times the contrastive loss (zero
/// during warmup) with Adam. Keeps the parameters with the lowest validation
/// MSE, the untrained adapter included, and stops after `patience` epochs
/// without improvement. A non-finite loss or parameter ends training early;
/// the best finite parameters are returned and the report records the epoch.
pub fn fit(config: &TrainConfig, splits: &Splits, backbone: &BackboneState) -> Result<FitOutput> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(CoraError::Data("few-shot train split is empty".into()));
    }
    let n = splits.train.channels();
    let mut state = AdapterState::new(config.adapter(n, &backbone.config), config.seed)?;
    let stats = state.config.use_hpcl.then_some(state.config.dce);
    let train = Prepared::new(backbone, &splits.train, stats)?;
    let val = if splits.val.is_empty() {
        None
    } else {
        Some(Prepared::new(backbone, &splits.val, None)?)
    };
    let select = |s: &AdapterState, train_mse: f64| -> Result<f64> {
        match &val {
            Some(v) => v.mse(s),
            None => Ok(train_mse),
        }
    };

    let mut adam = Adam::new(&state.store, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut report = MetricsReport {
        backbone_params: backbone.embedding.numel() + backbone.head.numel(),
        adapter_params: state.store.trainable_scalars(),
        ..MetricsReport::default()
    };
    let mut best: ParamStore = state.store.clone();
    let mut best_val = select(&state, train.mse(&state)?)?;
    let mut stale = 0;

    'epochs: for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let lambda = if epoch < config.warmup_epochs { 0.0 } else { config.lambda_aux };
        order.shuffle(&mut rng);
        let (mut mse, mut l_pos, mut l_neg, mut l_aux) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            match train_step(&mut state, &mut adam, &train, idx, lambda) {
                Ok(s) => {
                    let w = idx.len() as f64;
                    mse += w * s.mse;
                    l_pos += w * s.l_pos;
                    l_neg += w * s.l_neg;
                    l_aux += w * s.l_aux;
                }
                Err(CoraError::NonFinite { .. }) => {
                    report.diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let count = order.len() as f64;
        let train_mse = mse / count;
        let val_mse = select(&state, train_mse)?;
        if !val_mse.is_finite() {
            report.diverged = Some(epoch);
            break;
        }
        report.epochs.push(EpochMetrics {
            epoch,
            train_mse,
            l_pos: l_pos / count,
            l_neg: l_neg / count,
            l_aux: l_aux / count,
            val_mse,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if val_mse < best_val {
            best_val = val_mse;
            best = state.store.clone();
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience.max(1) {
                break;
            }
        }
    }

    state.store = best;
    report.best_val_mse = best_val;
    if !splits.test.is_empty() {
        report.test = Some(evaluate(&state, backbone, &splits.test)?);
    }
    Ok(FitOutput { adapter: state, report })
}
