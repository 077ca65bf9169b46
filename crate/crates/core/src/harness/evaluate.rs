use crate::adapter::AdapterState;
use crate::autodiff::Tensor;
use crate::backbone::{backbone_forward, BackboneOutput, BackboneState};
use crate::data::WindowBatch;
use crate::error::{CoraError, Result};
use crate::infer::{block_windows, InferenceModel};

use super::metrics::EvalMetrics;

fn check(adapter: &AdapterState, backbone: &BackboneState, windows: &WindowBatch) -> Result<()> {
    let (a, b) = (&adapter.config, &backbone.config);
    if a.patches != b.patches() || a.repr_dim != b.repr_dim || a.horizon != b.horizon {
        return Err(CoraError::shape(
            "evaluate",
            format!(
                "adapter (P={}, d={}, F={}) does not fit backbone (P={}, d={}, F={})",
                a.patches,
                a.repr_dim,
                a.horizon,
                b.patches(),
                b.repr_dim,
                b.horizon
            ),
        ));
    }
    if !windows.is_empty() && windows.channels() != a.channels {
        return Err(CoraError::shape(
            "evaluate",
            format!("{} channels for an adapter built on {}", windows.channels(), a.channels),
        ));
    }
    Ok(())
}

/// Raw-space forecasts of the adapted model through the inference path
/// (division and fusion only), given precomputed backbone outputs.
pub fn predict_prepared(model: &InferenceModel<f64>, out: &BackboneOutput) -> Result<Tensor> {
    let b = out.repr.shape()[0];
    let mut y = model.predict_norm(out.repr.data(), out.yhat_norm.data(), b)?;
    let f = out.yhat.shape()[2];
    for (r, row) in y.chunks_mut(f).enumerate() {
        let (m, s) = (out.mean.data()[r], out.std.data()[r]);
        for v in row {
            *v = m + s * *v;
        }
    }
    Tensor::new(out.yhat.shape().to_vec(), y)
}

/// Raw-space forecasts `[B, N, F]` of backbone plus adapter.
pub fn predict(adapter: &AdapterState, backbone: &BackboneState, windows: &WindowBatch) -> Result<Tensor> {
    check(adapter, backbone, windows)?;
    let model = InferenceModel::<f64>::new(adapter);
    let (n, f) = (windows.channels(), backbone.config.horizon);
    let mut data = Vec::with_capacity(windows.len() * n * f);
    let chunk = block_windows(n);
    for start in (0..windows.len()).step_by(chunk) {
        let part = windows.range(start, (start + chunk).min(windows.len()));
        let out = backbone_forward(backbone, &part.inputs)?;
        data.extend(predict_prepared(&model, &out)?.into_data());
    }
    Tensor::new(vec![windows.len(), n, f], data)
}

/// Test MSE and MAE of the adapted model in raw space.
pub fn evaluate(adapter: &AdapterState, backbone: &BackboneState, windows: &WindowBatch) -> Result<EvalMetrics> {
    if windows.is_empty() {
        return Err(CoraError::Data("cannot evaluate on an empty split".into()));
    }
    let pred = predict(adapter, backbone, windows)?;
    Ok(EvalMetrics::from_slices(pred.data(), windows.targets.data(), windows.len()))
}

/// Test MSE and MAE of the frozen backbone alone.
pub fn evaluate_backbone(backbone: &BackboneState, windows: &WindowBatch) -> Result<EvalMetrics> {
    if windows.is_empty() {
        return Err(CoraError::Data("cannot evaluate on an empty split".into()));
    }
    let mut pred = Vec::with_capacity(windows.targets.numel());
    let chunk = block_windows(windows.channels());
    for start in (0..windows.len()).step_by(chunk) {
        let part = windows.range(start, (start + chunk).min(windows.len()));
        pred.extend(backbone_forward(backbone, &part.inputs)?.yhat.into_data());
    }
    Ok(EvalMetrics::from_slices(&pred, windows.targets.data(), windows.len()))
}
