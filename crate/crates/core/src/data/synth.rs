use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{channel_names, MultivariateSeries};
use crate::error::{CoraError, Result};
use crate::io::write_atomic;

/// Steps discarded before recording so the filters start near stationarity.
const BURN_IN: usize = 1024;
const PSD_FLOOR: f64 = -1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeTags {
    pub dynamic: bool,
    pub heterogeneous: bool,
    pub partial: bool,
}

/// Correlation matrices planted segment by segment; segment `s` uses
/// `matrices[s % matrices.len()]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedStructure {
    pub segment_len: usize,
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub eps: f64,
    pub tags: RegimeTags,
}

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let n = m.len();
    DMatrix::from_fn(n, n, |i, j| m[i][j])
}

impl PlantedStructure {
    /// Validate the matrices and derive the regime tags from them.
    pub fn new(segment_len: usize, matrices: Vec<Vec<Vec<f64>>>, eps: f64) -> Result<Self> {
        let n = matrices
            .first()
            .map(Vec::len)
            .ok_or_else(|| CoraError::Config("planted structure needs at least one matrix".into()))?;
        for (k, m) in matrices.iter().enumerate() {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(CoraError::Config(format!("matrix {k} is not {n}x{n}")));
            }
            for i in 0..n {
                if (m[i][i] - 1.0).abs() > 1e-9 {
                    return Err(CoraError::Config(format!("matrix {k} has diagonal {} at {i}", m[i][i])));
                }
                for j in 0..n {
                    if (m[i][j] - m[j][i]).abs() > 1e-12 || m[i][j].abs() > 1.0 + 1e-12 {
                        return Err(CoraError::Config(format!("matrix {k} is not a correlation matrix at ({i},{j})")));
                    }
                }
            }
            let min_eig = SymmetricEigen::new(to_dmatrix(m)).eigenvalues.min();
            if min_eig < PSD_FLOOR {
                return Err(CoraError::Config(format!(
                    "matrix {k} is not positive semidefinite (eigenvalue {min_eig:.3e})"
                )));
            }
        }
        if segment_len < 8 * n {
            return Err(CoraError::Config(format!(
                "segment length {segment_len} is below 8*N = {} steps",
                8 * n
            )));
        }
        let mut tags = RegimeTags::default();
        let distinct = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter().flatten().zip(b.iter().flatten()).any(|(x, y)| (x - y).abs() > 1e-12)
        };
        tags.dynamic = matrices.windows(2).any(|w| distinct(&w[0], &w[1]))
            || (matrices.len() > 1 && distinct(&matrices[0], matrices.last().unwrap()));
        for m in &matrices {
            for a in 0..n {
                for b in 0..n {
                    if b == a {
                        continue;
                    }
                    if m[a][b].abs() < eps {
                        tags.partial = true;
                    }
                    for c in 0..n {
                        if c != a && c != b && m[a][b] * m[a][c] < 0.0 {
                            tags.heterogeneous = true;
                        }
                    }
                }
            }
        }
        Ok(Self {
            segment_len,
            matrices,
            eps,
            tags,
        })
    }

    pub fn channels(&self) -> usize {
        self.matrices[0].len()
    }

    /// Index of the matrix in force at step `t`.
    pub fn matrix_at(&self, t: usize) -> usize {
        (t / self.segment_len) % self.matrices.len()
    }
}

/// `rho * s sᵀ + (1 - rho) I` for a sign vector `s`.
pub fn signed_rank_one(signs: &[f64], rho: f64) -> Vec<Vec<f64>> {
    let n = signs.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 1.0 } else { rho * signs[i] * signs[j] })
                .collect()
        })
        .collect()
}

/// Channels in `block` share correlation `rho`; every other pair is uncorrelated.
pub fn block_correlation(n: usize, block: &[usize], rho: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if block.contains(&i) && block.contains(&j) {
                        rho
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-channel forecastability filter: an AR(1) part plus a lightly damped
/// second-order resonator at `period`, both driven by the same innovation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub ar: f64,
    pub period: f64,
    /// Pole radius of the resonator; closer to 1 means a longer-lived cycle.
    pub radius: f64,
    /// Resonator amplitude relative to the AR part (in stationary std units).
    pub gain: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            ar: 0.7,
            period: 24.0,
            radius: 0.995,
            gain: 1.5,
        }
    }
}

impl FilterSpec {
    fn validate(&self) -> Result<()> {
        if !(self.ar.abs() < 1.0 && self.radius >= 0.0 && self.radius < 1.0 && self.period > 2.0 && self.gain >= 0.0) {
            return Err(CoraError::Config(format!("unstable or invalid filter {self:?}")));
        }
        Ok(())
    }

    /// Stationary std of the AR(1) and resonator parts for unit innovations.
    fn stationary_std(&self) -> (f64, f64) {
        let var_ar = 1.0 / (1.0 - self.ar * self.ar);
        let (p1, p2) = self.resonator_coefs();
        let var_res = (1.0 - p2) / ((1.0 + p2) * ((1.0 - p2).powi(2) - p1 * p1));
        (var_ar.sqrt(), var_res.sqrt())
    }

    fn resonator_coefs(&self) -> (f64, f64) {
        let w = 2.0 * PI / self.period;
        (2.0 * self.radius * w.cos(), -self.radius * self.radius)
    }

    /// Random filter drawn from a broad family, used for pretraining corpora.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            ar: rng.random_range(0.2..0.95),
            period: rng.random_range(6.0..64.0),
            radius: rng.random_range(0.85..0.995),
            gain: rng.random_range(0.0..1.5),
        }
    }
}

struct ChannelFilter {
    ar: f64,
    p1: f64,
    p2: f64,
    /// Multiplies the resonator state so that it contributes `gain` times the AR std.
    mix: f64,
    u: f64,
    v1: f64,
    v2: f64,
}

impl ChannelFilter {
    fn new(spec: &FilterSpec) -> Self {
        let (sd_ar, sd_res) = spec.stationary_std();
        let (p1, p2) = spec.resonator_coefs();
        Self {
            ar: spec.ar,
            p1,
            p2,
            mix: spec.gain * sd_ar / sd_res,
            u: 0.0,
            v1: 0.0,
            v2: 0.0,
        }
    }

    fn step(&mut self, e: f64) -> f64 {
        self.u = self.ar * self.u + e;
        let v = self.p1 * self.v1 + self.p2 * self.v2 + e;
        self.v2 = self.v1;
        self.v1 = v;
        self.u + self.mix * v
    }
}

/// `U diag(sqrt(max(λ, 0)))` from the eigendecomposition of `c`.
fn psd_factor(c: &[Vec<f64>]) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(to_dmatrix(c));
    let n = c.len();
    let mut f = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    f
}

/// Generate a series realizing `structure` with the default filter on every channel.
pub fn generate_synthetic(
    structure: &PlantedStructure,
    t_total: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(MultivariateSeries, PlantedStructure)> {
    let filters = vec![FilterSpec::default(); structure.channels()];
    generate_with_filters(structure, t_total, noise_std, seed, &filters)
}

/// Correlated Gaussian innovations (covariance `C^(k)` in segment `k`) passed
/// through one filter per channel, plus i.i.d. observation noise.
///
/// When every channel uses the same filter the per-segment Pearson matrix of
/// the output converges to the planted matrix.
pub fn generate_with_filters(
    structure: &PlantedStructure,
    t_total: usize,
    noise_std: f64,
    seed: u64,
    filters: &[FilterSpec],
) -> Result<(MultivariateSeries, PlantedStructure)> {
    let n = structure.channels();
    if filters.len() != n {
        return Err(CoraError::Config(format!("{} filters for {n} channels", filters.len())));
    }
    if t_total == 0 || !(noise_std >= 0.0) {
        return Err(CoraError::Config("series length must be positive and noise_std >= 0".into()));
    }
    for f in filters {
        f.validate()?;
    }
    // Re-validate: the structure may have been deserialized or edited.
    let checked = PlantedStructure::new(structure.segment_len, structure.matrices.clone(), structure.eps)?;
    let factors: Vec<DMatrix<f64>> = checked.matrices.iter().map(|m| psd_factor(m)).collect();
    let mut chans: Vec<ChannelFilter> = filters.iter().map(ChannelFilter::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; n];
    let mut values = vec![Vec::with_capacity(t_total); n];
    for t in 0..BURN_IN + t_total {
        let k = if t < BURN_IN { 0 } else { checked.matrix_at(t - BURN_IN) };
        let f = &factors[k];
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..n {
            let mut e = 0.0;
            for j in 0..n {
                e += f[(i, j)] * z[j];
            }
            let y = chans[i].step(e);
            if t >= BURN_IN {
                values[i].push(y);
            }
        }
        if t >= BURN_IN && noise_std > 0.0 {
            for v in values.iter_mut() {
                let eta: f64 = StandardNormal.sample(&mut rng);
                *v.last_mut().unwrap() += noise_std * eta;
            }
        }
    }
    let mut series = MultivariateSeries::new(channel_names(n), values)?;
    series.timestamps = Some((0..t_total).map(|t| t.to_string()).collect());
    Ok((series, checked))
}

/// Independent channels with per-channel filters drawn from [`FilterSpec::sample`];
/// the corpus a backbone is pretrained on.
pub fn pretraining_series(channels: usize, t_total: usize, seed: u64) -> Result<MultivariateSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11e);
    let filters: Vec<FilterSpec> = (0..channels).map(|_| FilterSpec::sample(&mut rng)).collect();
    let identity = block_correlation(channels, &[], 0.0);
    let structure = PlantedStructure::new(t_total.max(8 * channels), vec![identity], 0.2)?;
    Ok(generate_with_filters(&structure, t_total, 0.0, seed, &filters)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub matrix: usize,
}

/// Ground truth written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub t_total: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub structure: PlantedStructure,
    pub segments: Vec<SegmentSpan>,
}

impl TruthFile {
    pub fn new(structure: PlantedStructure, t_total: usize, noise_std: f64, seed: u64) -> Self {
        let segments = (0..t_total)
            .step_by(structure.segment_len)
            .map(|start| SegmentSpan {
                start,
                end: (start + structure.segment_len).min(t_total),
                matrix: structure.matrix_at(start),
            })
            .collect();
        Self {
            t_total,
            noise_std,
            seed,
            structure,
            segments,
        }
    }
}

pub fn write_truth(path: &Path, truth: &TruthFile) -> Result<()> {
    let text = serde_json::to_string_pretty(truth)?;
    write_atomic(path, text.as_bytes())
}

pub fn read_truth(path: &Path) -> Result<TruthFile> {
    let text = std::fs::read_to_string(path)?;
    let truth: TruthFile = serde_json::from_str(&text)?;
    PlantedStructure::new(
        truth.structure.segment_len,
        truth.structure.matrices.clone(),
        truth.structure.eps,
    )?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let sab: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn tags_follow_definitions() {
        let s = PlantedStructure::new(64, vec![signed_rank_one(&[1.0, 1.0, -1.0], 0.8)], 0.2).unwrap();
        assert_eq!(
            s.tags,
            RegimeTags {
                dynamic: false,
                heterogeneous: true,
                partial: false
            }
        );
        let s = PlantedStructure::new(
            64,
            vec![block_correlation(3, &[0, 1], 0.7), signed_rank_one(&[1.0; 3], 0.5)],
            0.2,
        )
        .unwrap();
        assert!(s.tags.dynamic && s.tags.partial && !s.tags.heterogeneous);
        let one = PlantedStructure::new(8, vec![vec![vec![1.0]]], 0.2).unwrap();
        assert_eq!(one.tags, RegimeTags::default());
    }

    #[test]
    fn rejects_invalid_structures() {
        let bad = vec![vec![1.0, 0.9, 0.9], vec![0.9, 1.0, -0.9], vec![0.9, -0.9, 1.0]];
        assert!(PlantedStructure::new(64, vec![bad], 0.2).is_err());
        assert!(PlantedStructure::new(10, vec![signed_rank_one(&[1.0, 1.0], 0.5)], 0.2).is_err());
        let asym = vec![vec![1.0, 0.2], vec![0.3, 1.0]];
        assert!(PlantedStructure::new(64, vec![asym], 0.2).is_err());
    }

    #[test]
    fn strong_pair_converges() {
        let s = PlantedStructure::new(4096, vec![signed_rank_one(&[1.0, 1.0], 0.95)], 0.2).unwrap();
        let (series, _) = generate_synthetic(&s, 4096, 0.0, 7).unwrap();
        let r = corr(&series.values[0], &series.values[1]);
        assert!((r - 0.95).abs() < 0.03, "r = {r}");
    }

    #[test]
    fn generator_is_deterministic() {
        let s = PlantedStructure::new(64, vec![signed_rank_one(&[1.0, -1.0, 1.0], 0.6)], 0.2).unwrap();
        let (a, _) = generate_synthetic(&s, 300, 0.1, 3).unwrap();
        let (b, _) = generate_synthetic(&s, 300, 0.1, 3).unwrap();
        let (c, _) = generate_synthetic(&s, 300, 0.1, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn truth_segments_cover_series() {
        let s = PlantedStructure::new(
            100,
            vec![signed_rank_one(&[1.0, 1.0], 0.5), signed_rank_one(&[1.0, -1.0], 0.5)],
            0.2,
        )
        .unwrap();
        let t = TruthFile::new(s, 250, 0.0, 1);
        let spans: Vec<_> = t.segments.iter().map(|s| (s.start, s.end, s.matrix)).collect();
        assert_eq!(spans, vec![(0, 100, 0), (100, 200, 1), (200, 250, 0)]);
    }

    #[test]
    fn filter_mix_matches_gain() {
        let spec = FilterSpec::default();
        let (a, r) = spec.stationary_std();
        assert!((a - (1.0f64 / 0.51).sqrt()).abs() < 1e-12);
        assert!(r > a);
    }
}
