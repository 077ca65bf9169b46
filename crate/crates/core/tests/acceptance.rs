//! Acceptance suite: every criterion at its stated tolerance and time budget,
//! one PASS/FAIL line each. Runs as a plain binary so the report is always
//! printed; exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cora::adapter::{AdapterConfig, AdapterState};
use cora::autodiff::{grad_check, Graph, Tensor};
use cora::backbone::BackboneState;
use cora::data::{make_windows, Splits};
use cora::dce::{decompose_low_rank, pearson_batch, polynomial_fits};
use cora::harness::{
    ablate, bench, evaluate, evaluate_backbone, fit, learned_correlation, pretrained_backbone, sign_agreement,
    AblationRow, AblationTable, BenchConfig, BenchMode, Regime, TrainConfig,
};
use cora::hpcl::{aux_loss, threshold_masks, HpclConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{contrastive_oracle, full_loss, pearson_two_pass, randomize, Inputs};

const SEEDS: [u64; 3] = [0, 1, 2];
const BACKBONE_SEED: u64 = 1_000_000;

struct Outcome {
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut checked, mut excluded, mut failures) = (0.0f64, 0, 0, 0);
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let p = rng.random_range(1..=3);
        let d = rng.random_range(2..=8);
        let f = rng.random_range(1..=4);
        let b = rng.random_range(1..=2);
        let mut c = AdapterConfig::new(n, p, d, f);
        c.rank = Some(rng.random_range(1..n));
        c.degree = rng.random_range(0..=3);
        c.expansion = rng.random_range(1..=4);
        c.hd_depth = rng.random_range(1..=2);
        c.fusion_depth = rng.random_range(1..=2);
        c.symmetrize = rng.random_bool(0.5);
        c.hpcl.soft_gate = rng.random_bool(0.3);
        let mut state = AdapterState::new(c, rng.random()).unwrap();
        randomize(&mut state, 0.5, &mut rng);
        let inputs = Inputs::random(b, p, n, d, f, &mut rng);
        let lambda = rng.random_range(0.5..1.5);
        let params: Vec<(String, Tensor)> =
            state.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        let rep = grad_check(|g, v| full_loss(g, v, &state, &inputs, lambda), &params, 1e-5, 1e-4).unwrap();
        worst = worst.max(rep.max_rel_err());
        checked += rep.checked();
        excluded += rep.excluded();
        failures += usize::from(!rep.passed());
    }
    Outcome {
        pass: failures == 0 && worst < 1e-4,
        detail: format!("max rel err {worst:.2e} over {checked} entries, {excluded} kink probes excluded"),
        elapsed: t0.elapsed(),
        budget: secs(60),
    }
}

fn decomposition() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let m = rng.random_range(1..=8);
        let mut gauss = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let (qbar, qtilde, v) = (gauss(n, m), gauss(n, m), gauss(m, m));
        worst = worst.max(decompose_low_rank(&qbar, &qtilde, &v).unwrap().residual);
    }
    Outcome {
        pass: worst < 1e-10,
        detail: format!("max residual {worst:.2e} over 1000 instances"),
        elapsed: t0.elapsed(),
        budget: secs(5),
    }
}

fn polynomial_curve() -> Outcome {
    let t0 = Instant::now();
    let fits = polynomial_fits(f64::exp, 0..=4, (-1.0, 1.0), 401).unwrap();
    let errs: Vec<f64> = fits.iter().map(|f| f.max_error).collect();
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        pass: monotone && errs[4] < 1e-2,
        detail: format!("max errors {}", errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" ")),
        elapsed: t0.elapsed(),
        budget: secs(5),
    }
}

fn loss_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = HpclConfig::default();
    let mut worst = 0.0f64;
    for n in 1..=8 {
        for _ in 0..100 {
            let (b, p, d) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
            let g = Graph::new();
            let m = Tensor::uniform(&[b, n, n], -1.0, 1.0, &mut rng);
            let mv = g.constant(m);
            let eps = g.constant(Tensor::scalar(rng.random_range(0.0..0.6)));
            let masks = threshold_masks(&g, mv, eps, &cfg).unwrap();
            let xp = Tensor::randn(&[b, p, n, d], 1.0, &mut rng);
            let xn = Tensor::randn(&[b, p, n, d], 1.0, &mut rng);
            let (vp, vn) = (g.constant(xp.clone()), g.constant(xn.clone()));
            let aux = aux_loss(&g, vp, vn, &masks, &cfg).unwrap();
            let wp = g.value(masks.pos).clone();
            let wn = g.value(masks.neg).map(f64::abs);
            let dp = (g.value(aux.pos).item() - contrastive_oracle(&xp, &wp, cfg.tau)).abs();
            let dn = (g.value(aux.neg).item() - contrastive_oracle(&xn, &wn, cfg.tau)).abs();
            worst = worst.max(dp).max(dn);
        }
    }
    Outcome {
        pass: worst < 1e-10,
        detail: format!("max |vectorized - loop| {worst:.2e} for N = 1..8"),
        elapsed: t0.elapsed(),
        budget: secs(10),
    }
}

fn pearson_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut worst, mut structural) = (0.0f64, true);
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let len = rng.random_range(4..=96);
        let scale = Tensor::uniform(&[1, n, 1], 0.1, 10.0, &mut rng);
        let base = Tensor::randn(&[1, n, len], 1.0, &mut rng);
        let shared = Tensor::randn(&[1, 1, len], 1.0, &mut rng);
        let x = Tensor::from_fn(&[1, n, len], |ix| {
            scale.get(&[0, ix[1], 0]) * (base.get(ix) + shared.get(&[0, 0, ix[2]])) + 3.0
        });
        let r = pearson_batch(&x).unwrap().values;
        for i in 0..n {
            let ri: Vec<f64> = (0..len).map(|t| x.get(&[0, i, t])).collect();
            structural &= r.get(&[0, i, i]) == 1.0;
            for j in 0..n {
                let rj: Vec<f64> = (0..len).map(|t| x.get(&[0, j, t])).collect();
                let v = r.get(&[0, i, j]);
                structural &= v == r.get(&[0, j, i]) && (-1.0..=1.0).contains(&v);
                if i != j {
                    worst = worst.max((v - pearson_two_pass(&ri, &rj)).abs());
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-10 && structural,
        detail: format!("max |batched - two-pass| {worst:.2e}, symmetric/unit-diagonal/bounded: {structural}"),
        elapsed: t0.elapsed(),
        budget: secs(5),
    }
}

/// Configuration of the end-to-end experiments: defaults, with a wider
/// representation, 5% few-shot training and a coarser evaluation stride.
fn experiment_config() -> TrainConfig {
    TrainConfig {
        repr_dim: 16,
        few_shot: 0.05,
        eval_stride: 8,
        ..TrainConfig::default()
    }
}

fn splits_for(cfg: &TrainConfig, regime: Regime, seed: u64) -> (Splits, cora::data::PlantedStructure) {
    let (series, truth) = regime.generate(8, 8192, seed).unwrap();
    let splits = make_windows(&series, &cfg.split(), cfg.lookback, cfg.horizon).unwrap();
    (splits, truth)
}

/// Merge single-seed tables into one table with a column per seed.
fn merge(tables: Vec<AblationTable>) -> AblationTable {
    let mut rows: Vec<AblationRow> = tables[0].rows.clone();
    for t in &tables[1..] {
        for (acc, r) in rows.iter_mut().zip(&t.rows) {
            acc.seeds.extend(&r.seeds);
            acc.mse.extend(&r.mse);
            acc.mae.extend(&r.mae);
            acc.fits.extend(r.fits.iter().cloned());
        }
    }
    AblationTable { rows }
}

struct EndToEnd {
    outcome: Outcome,
    heterogeneous: AblationTable,
    heterogeneous_splits: Vec<(Splits, cora::data::PlantedStructure)>,
}

fn end_to_end(cfg: &TrainConfig, backbone: &BackboneState) -> EndToEnd {
    let t0 = Instant::now();
    let (mut pass, mut lines) = (true, Vec::new());
    let mut kept = None;
    for regime in Regime::ALL {
        let mut tables = Vec::new();
        let mut data = Vec::new();
        for seed in SEEDS {
            let (splits, truth) = splits_for(cfg, regime, seed);
            tables.push(ablate(cfg, &splits, backbone, &[seed]).unwrap());
            data.push((splits, truth));
        }
        let table = merge(tables);
        let means: Vec<f64> = (1..=5).map(|i| table.row(i).mean_mse()).collect();
        let gain = 1.0 - means[4] / means[0];
        let ordered = table.ordering_holds(0.01);
        pass &= gain >= 0.05 && ordered;
        lines.push(format!(
            "{}: gain {:.1}%, ordering {}, rows {}",
            regime.name(),
            100.0 * gain,
            if ordered { "ok" } else { "violated" },
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        ));
        if regime == Regime::Heterogeneous {
            kept = Some((table, data));
        }
    }
    let (heterogeneous, heterogeneous_splits) = kept.unwrap();
    EndToEnd {
        outcome: Outcome {
            pass,
            detail: lines.join("; "),
            elapsed: t0.elapsed(),
            budget: secs(600),
        },
        heterogeneous,
        heterogeneous_splits,
    }
}

/// Sign agreement of the trained full adapters from the heterogeneous runs.
fn correlation_recovery(e2e: &EndToEnd, backbone: &BackboneState, lookback: usize) -> Outcome {
    let t0 = Instant::now();
    let full = e2e.heterogeneous.row(5);
    let training: f64 = full.fits.iter().flat_map(|f| &f.report.epochs).map(|e| e.seconds).sum();
    let mut scores = Vec::new();
    for (fit, (splits, truth)) in full.fits.iter().zip(&e2e.heterogeneous_splits) {
        let m = learned_correlation(&fit.adapter, backbone, &splits.test).unwrap();
        let planted: Vec<&[Vec<f64>]> = splits
            .test
            .starts
            .iter()
            .map(|&s| truth.matrices[truth.matrix_at(s + lookback - 1)].as_slice())
            .collect();
        scores.push(sign_agreement(&m, &planted, 0.5).unwrap());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Outcome {
        pass: mean >= 0.8,
        detail: format!(
            "mean agreement {:.3} (seeds {}), training reused from the end-to-end runs",
            mean,
            scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join(" ")
        ),
        elapsed: t0.elapsed() + Duration::from_secs_f64(training),
        budget: secs(180),
    }
}

fn complexity() -> Outcome {
    let t0 = Instant::now();
    let cfg = BenchConfig::default();
    let inf = bench(&cfg, BenchMode::Inference).unwrap();
    let train = bench(&cfg, BenchMode::TrainStep).unwrap();
    Outcome {
        pass: (0.7..=1.3).contains(&inf.slope) && (1.5..=2.3).contains(&train.slope),
        detail: format!("inference slope {:.3}, training-step slope {:.3}", inf.slope, train.slope),
        elapsed: t0.elapsed(),
        budget: secs(300),
    }
}

fn identity_at_init(cfg: &TrainConfig, backbone: &BackboneState) -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for regime in Regime::ALL {
        let (splits, _) = splits_for(cfg, regime, 0);
        let state = AdapterState::new(cfg.adapter(8, &backbone.config), cfg.seed).unwrap();
        let a = evaluate(&state, backbone, &splits.test).unwrap().mse;
        let b = evaluate_backbone(backbone, &splits.test).unwrap().mse;
        worst = worst.max((a - b).abs() / b);
    }
    Outcome {
        pass: worst < 0.02,
        detail: format!("max relative gap to the backbone {:.3}%", 100.0 * worst),
        elapsed: t0.elapsed(),
        budget: secs(30),
    }
}

fn determinism(cfg: &TrainConfig, backbone: &BackboneState) -> Outcome {
    let t0 = Instant::now();
    let (splits, _) = splits_for(cfg, Regime::Dynamic, 0);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        fit(cfg, &splits, backbone).unwrap().report.write(d.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    let same = ["metrics.csv", "summary.csv"].iter().all(|f| read(&dirs[0], f) == read(&dirs[1], f));
    Outcome {
        pass: same,
        detail: format!("metrics.csv and summary.csv {}", if same { "byte-identical" } else { "differ" }),
        elapsed: t0.elapsed(),
        budget: secs(120),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        let ok = o.pass && o.elapsed <= o.budget;
        println!(
            "criterion {id:>2} {name:<24} {} {:>7.1}s / {:>3}s  {}",
            if ok { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64(),
            o.budget.as_secs(),
            o.detail
        );
        results.push((id, name, Outcome { pass: ok, ..o }));
    };
    record(1, "gradient suite", gradients());
    record(2, "low-rank decomposition", decomposition());
    record(3, "polynomial fit curve", polynomial_curve());
    record(4, "contrastive loss oracle", loss_oracle());
    record(5, "pearson oracle", pearson_oracle());

    let cfg = experiment_config();
    let backbone = pretrained_backbone(&cfg.backbone(), BACKBONE_SEED).unwrap();
    let e2e = end_to_end(&cfg, &backbone);
    let recovery = correlation_recovery(&e2e, &backbone, cfg.lookback);
    record(6, "end-to-end improvement", e2e.outcome);
    record(7, "correlation recovery", recovery);
    record(8, "complexity slopes", complexity());
    record(9, "identity at init", identity_at_init(&cfg, &backbone));
    record(10, "determinism", determinism(&cfg, &backbone));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
