use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapter::{correlation, AdapterState};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::{backbone_forward, BackboneState};
use crate::data::WindowBatch;
use crate::dce::pearson_batch;
use crate::error::{CoraError, Result};
use crate::infer::InferenceModel;
use crate::io::write_atomic;

/// Cosine similarity between channels of `x: [P, N, d]` flattened per channel to `P·d`.
fn channel_cosine(x: &[f64], p: usize, n: usize, d: usize) -> Tensor {
    let vecs: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..p).flat_map(|pi| x[(pi * n + c) * d..(pi * n + c + 1) * d].iter().copied()).collect())
        .collect();
    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    Tensor::from_fn(&[n, n], |ix| {
        let (i, j) = (ix[0], ix[1]);
        if i == j {
            return 1.0;
        }
        let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
        dot / (norms[i] * norms[j]).max(1e-12)
    })
}

/// Per window, `N × N` cosine similarities in the positive and the negative space.
pub fn similarity_matrices(
    adapter: &AdapterState,
    backbone: &BackboneState,
    windows: &WindowBatch,
) -> Result<Vec<(Tensor, Tensor)>> {
    if windows.is_empty() {
        return Err(CoraError::Data("no windows selected for export".into()));
    }
    let out = backbone_forward(backbone, &windows.inputs)?;
    let s = out.repr.shape();
    let (b, p, n, d) = (s[0], s[1], s[2], s[3]);
    let (pos, neg) = InferenceModel::<f64>::new(adapter).divide(out.repr.data(), b)?;
    let per = p * n * d;
    Ok((0..b)
        .map(|w| {
            (
                channel_cosine(&pos[w * per..(w + 1) * per], p, n, d),
                channel_cosine(&neg[w * per..(w + 1) * per], p, n, d),
            )
        })
        .collect())
}

/// Estimated correlation `[B, N, N]` for each window: Pearson of the input
/// plus the learned term when the adapter has one.
pub fn learned_correlation(adapter: &AdapterState, backbone: &BackboneState, windows: &WindowBatch) -> Result<Tensor> {
    let out = backbone_forward(backbone, &windows.inputs)?;
    let r = pearson_batch(&windows.inputs)?.values;
    let g = Graph::new();
    let p = adapter.store.bind(&g);
    let repr = g.constant(out.repr);
    let r = g.constant(r);
    let m = correlation(&g, &p, adapter, repr, r)?;
    let v = g.value(m).clone();
    Ok(v)
}

/// Fraction of entries with `|planted| > threshold` whose sign `learned` matches.
/// `learned` is `[B, N, N]`; `planted[w]` is the matrix in force for window `w`.
/// Returns `None` when no entry qualifies.
pub fn sign_agreement(learned: &Tensor, planted: &[&[Vec<f64>]], threshold: f64) -> Option<f64> {
    let n = learned.shape()[1];
    let (mut hit, mut total) = (0usize, 0usize);
    for (w, c) in planted.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if i != j && c[i][j].abs() > threshold {
                    total += 1;
                    if learned.get(&[w, i, j]).signum() == c[i][j].signum() {
                        hit += 1;
                    }
                }
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// `channel,<names...>` header, then one row per channel.
pub fn write_matrix_csv(path: &Path, names: &[String], m: &Tensor) -> Result<()> {
    let n = names.len();
    if m.shape() != [n, n] {
        return Err(CoraError::shape("write_matrix_csv", format!("{:?} for {n} names", m.shape())));
    }
    let mut s = format!("channel,{}\n", names.join(","));
    for (i, name) in names.iter().enumerate() {
        s.push_str(name);
        for j in 0..n {
            let _ = write!(s, ",{:.16e}", m.get(&[i, j]));
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Write `sim_w{index}_pos.csv` and `sim_w{index}_neg.csv` for each selected window.
pub fn export_similarity(
    adapter: &AdapterState,
    backbone: &BackboneState,
    windows: &WindowBatch,
    indices: &[usize],
    names: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= windows.len()) {
        return Err(CoraError::Data(format!("window {bad} out of range ({} windows)", windows.len())));
    }
    let selected = windows.select(indices);
    let mats = similarity_matrices(adapter, backbone, &selected)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (&w, (pos, neg)) in indices.iter().zip(&mats) {
        for (tag, m) in [("pos", pos), ("neg", neg)] {
            let path = out_dir.join(format!("sim_w{w}_{tag}.csv"));
            write_matrix_csv(&path, names, m)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
