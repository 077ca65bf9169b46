use super::MultivariateSeries;
use crate::autodiff::Tensor;
use crate::dce::pearson_matrix;
use crate::error::{CoraError, Result};

/// Significance (in standard errors) a correlation needs before its sign
/// counts towards heterogeneity. Larger than the dynamic margin because the
/// test scans every channel triple.
const SIGN_MARGIN: f64 = 3.0;
/// Margin on the Frobenius distance between segment matrices.
const CHANGE_MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeReport {
    pub dynamic: bool,
    pub heterogeneous: bool,
    pub partial: bool,
    pub segments: usize,
    /// Per-segment empirical Pearson matrices, `[N, N]` each.
    pub matrices: Vec<Tensor>,
}

fn autocorr(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    if c0 == 0.0 {
        return vec![0.0; max_lag];
    }
    (1..=max_lag)
        .map(|k| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect()
}

/// Bartlett-style effective sample size for a correlation between two
/// autocorrelated series of length `len`.
pub fn effective_sample_size(acf_a: &[f64], acf_b: &[f64], len: usize) -> f64 {
    let s: f64 = acf_a.iter().zip(acf_b).map(|(a, b)| a * b).sum();
    (len as f64 / (1.0 + 2.0 * s)).clamp(3.0, len as f64)
}

/// Check the dynamic / heterogeneous / partial definitions on per-segment
/// Pearson matrices of length-`segment_len` segments.
///
/// Standard errors use `(1 - r²) / sqrt(n_eff)` with an autocorrelation
/// corrected `n_eff`. Dynamic: two segment matrices differ in Frobenius norm
/// by more than twice the noise level of that distance. Heterogeneous: some
/// channel has a significantly positive and a significantly negative partner.
/// Partial: some pair has `|r| < eps`.
pub fn verify_regime(series: &MultivariateSeries, segment_len: usize, eps: f64) -> Result<RegimeReport> {
    let n = series.channels();
    if segment_len < 8 * n.max(1) {
        return Err(CoraError::Config(format!("segment length {segment_len} below 8*N")));
    }
    let segments = series.len() / segment_len;
    let mut report = RegimeReport {
        dynamic: false,
        heterogeneous: false,
        partial: false,
        segments,
        matrices: Vec::new(),
    };
    if n < 2 || segments == 0 {
        return Ok(report);
    }
    let max_lag = (segment_len / 4).min(200);
    let mut ses = Vec::with_capacity(segments);
    for s in 0..segments {
        let (a, b) = (s * segment_len, (s + 1) * segment_len);
        let data: Vec<f64> = series.values.iter().flat_map(|c| c[a..b].iter().copied()).collect();
        let r = pearson_matrix(&Tensor::new(vec![n, segment_len], data)?)?.values;
        let acfs: Vec<Vec<f64>> = series.values.iter().map(|c| autocorr(&c[a..b], max_lag)).collect();
        let mut se = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let ne = effective_sample_size(&acfs[i], &acfs[j], segment_len);
                    let rij = r.get(&[i, j]);
                    se.set(&[i, j], (1.0 - rij * rij).max(1e-12) / ne.sqrt());
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                if b == a {
                    continue;
                }
                let rab = r.get(&[a, b]);
                if rab.abs() < eps {
                    report.partial = true;
                }
                if rab > SIGN_MARGIN * se.get(&[a, b]) {
                    let has_negative = (0..n)
                        .any(|c| c != a && c != b && r.get(&[a, c]) < -SIGN_MARGIN * se.get(&[a, c]));
                    if has_negative {
                        report.heterogeneous = true;
                    }
                }
            }
        }
        report.matrices.push(r);
        ses.push(se);
    }
    for m in 0..segments {
        for k in m + 1..segments {
            let (mut dist, mut noise) = (0.0, 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    let d = report.matrices[m].get(&[i, j]) - report.matrices[k].get(&[i, j]);
                    dist += d * d;
                    noise += ses[m].get(&[i, j]).powi(2) + ses[k].get(&[i, j]).powi(2);
                }
            }
            if dist.sqrt() > CHANGE_MARGIN * noise.sqrt() {
                report.dynamic = true;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::channel_names;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_channel_is_vacuous() {
        let s = MultivariateSeries::new(channel_names(1), vec![(0..100).map(|i| i as f64).collect()]).unwrap();
        let r = verify_regime(&s, 50, 0.2).unwrap();
        assert!(!r.dynamic && !r.heterogeneous && !r.partial);
    }

    #[test]
    fn iid_channels_are_partial_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values = (0..4)
            .map(|_| (0..4096).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let s = MultivariateSeries::new(channel_names(4), values).unwrap();
        let r = verify_regime(&s, 2048, 0.2).unwrap();
        assert!(!r.dynamic && !r.heterogeneous && r.partial);
        assert_eq!(r.segments, 2);
    }

    #[test]
    fn white_noise_has_full_sample_size() {
        let zeros = vec![0.0; 10];
        assert_eq!(effective_sample_size(&zeros, &zeros, 500), 500.0);
        let persistent = vec![0.9; 10];
        assert!(effective_sample_size(&persistent, &persistent, 500) < 50.0);
    }
}
