use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use cora::adapter::{load_adapter, save_adapter};
use cora::backbone::{load_backbone, pretrain_backbone, save_backbone, BackboneState};
use cora::data::{load_csv, make_windows, write_csv, write_truth, CsvSchema, MultivariateSeries, Splits, TruthFile};
use cora::harness::{
    ablate, bench, evaluate, evaluate_backbone, export_similarity, fit, learned_correlation, pretraining_corpus,
    write_matrix_csv, BenchConfig, BenchMode, Precision, Regime, TrainConfig,
};
use cora::io::write_atomic;
use cora::CoraError;

#[derive(Parser)]
#[command(name = "cora", version, about = "Correlation-aware adapter for frozen forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<TrainConfig> {
        Ok(TrainConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Dynamic,
    Heterogeneous,
    Partial,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Dynamic => Regime::Dynamic,
            RegimeArg::Heterogeneous => Regime::Heterogeneous,
            RegimeArg::Partial => Regime::Partial,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TrainStep,
    Inference,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-correlation series and its truth sidecar.
    Synth {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 8192)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; the truth sidecar is written next to it as `<stem>.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the frozen backbone.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV corpus; without it a synthetic corpus of independent channels is used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        corpus_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an adapter on the few-shot train split.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        /// Receives adapter.bin, metrics.csv, summary.csv, timing.csv and config.toml.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Test MSE/MAE of backbone plus adapter, or of the backbone alone.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Fit the five ablation rows and write a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time training steps or inference against the channel count.
    Bench {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "8,32,128,512")]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Windows per training step.
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Windows per timed inference pass.
        #[arg(long, default_value_t = 256)]
        inference_batch: usize,
        #[arg(long, default_value_t = 4)]
        repr_dim: usize,
        #[arg(long, value_enum, default_value = "f64")]
        precision: PrecisionArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-window channel similarity matrices of the two spaces.
    ExportSim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        windows: Vec<usize>,
        /// Also write the estimated correlation matrix of each window.
        #[arg(long)]
        correlation: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_series(path: &Path, cfg: &TrainConfig) -> anyhow::Result<MultivariateSeries> {
    let schema = CsvSchema {
        min_rows: cfg.lookback + cfg.horizon,
        ..CsvSchema::default()
    };
    load_csv(path, &schema).with_context(|| format!("reading {}", path.display()))
}

fn read_backbone(path: &Path) -> anyhow::Result<BackboneState> {
    load_backbone(path).with_context(|| format!("reading backbone {}", path.display()))
}

fn read_adapter(path: &Path) -> anyhow::Result<cora::adapter::AdapterState> {
    load_adapter(path).with_context(|| format!("reading adapter {}", path.display()))
}

/// Splits of `data`, using the window geometry stored in the backbone.
fn load_splits(path: &Path, cfg: &TrainConfig, backbone: &BackboneState) -> anyhow::Result<(MultivariateSeries, Splits)> {
    let cfg = TrainConfig {
        lookback: backbone.config.lookback,
        horizon: backbone.config.horizon,
        ..cfg.clone()
    };
    let series = load_series(path, &cfg)?;
    let splits = make_windows(&series, &cfg.split(), cfg.lookback, cfg.horizon)?;
    Ok((series, splits))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            regime,
            channels,
            length,
            seed,
            out,
        } => {
            let regime = Regime::from(regime);
            let (series, truth) = regime.generate(channels, length, seed)?;
            write_csv(&out, &series)?;
            let sidecar = out.with_extension("truth.json");
            write_truth(&sidecar, &TruthFile::new(truth, length, cora::harness::suite::SUITE_NOISE, seed))?;
            println!("wrote {} ({} channels x {} steps) and {}", out.display(), channels, length, sidecar.display());
        }
        Command::Pretrain {
            cfg,
            data,
            corpus_seed,
            out,
        } => {
            let cfg = cfg.load()?;
            let bcfg = cfg.backbone();
            let corpus = match data {
                Some(p) => {
                    let series = load_series(&p, &cfg)?;
                    let spec = cora::data::SplitSpec {
                        train: 1.0,
                        val: 0.0,
                        test: 0.0,
                        stride: cfg.stride,
                        ..Default::default()
                    };
                    make_windows(&series, &spec, cfg.lookback, cfg.horizon)?.train
                }
                None => pretraining_corpus(&bcfg, corpus_seed)?,
            };
            let (state, report) = pretrain_backbone(&corpus, &bcfg)?;
            save_backbone(&out, &state)?;
            println!(
                "pretrained on {} windows: train mse {:.6}, ridge {:e} ({} escalations)",
                corpus.len(),
                report.train_mse,
                report.ridge_used,
                report.ridge_escalations
            );
        }
        Command::Fit {
            cfg,
            data,
            backbone,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let bb = read_backbone(&backbone)?;
            let (_, splits) = load_splits(&data, &cfg, &bb)?;
            let out = fit(&cfg, &splits, &bb)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            save_adapter(&out_dir.join("adapter.bin"), &out.adapter)?;
            out.report.write(&out_dir)?;
            write_atomic(&out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            if let Some(t) = out.report.test {
                println!("test mse {:.6} mae {:.6} ({} windows)", t.mse, t.mae, t.windows);
            }
            if let Some(epoch) = out.report.diverged {
                return Err(CoraError::Diverged { epoch }.into());
            }
        }
        Command::Eval {
            cfg,
            data,
            backbone,
            adapter,
        } => {
            let cfg = cfg.load()?;
            let bb = read_backbone(&backbone)?;
            let (_, splits) = load_splits(&data, &cfg, &bb)?;
            let m = match adapter {
                Some(p) => evaluate(&read_adapter(&p)?, &bb, &splits.test)?,
                None => evaluate_backbone(&bb, &splits.test)?,
            };
            println!("mse,mae,windows\n{:.16e},{:.16e},{}", m.mse, m.mae, m.windows);
        }
        Command::Ablate {
            cfg,
            data,
            backbone,
            seeds,
            out,
        } => {
            let cfg = cfg.load()?;
            let bb = read_backbone(&backbone)?;
            let (_, splits) = load_splits(&data, &cfg, &bb)?;
            let table = ablate(&cfg, &splits, &bb, &seeds)?;
            write_atomic(&out, table.to_csv().as_bytes())?;
            for r in &table.rows {
                println!("{} {:<16} mse {:.6} mae {:.6}", r.row, r.name, r.mean_mse(), r.mean_mae());
            }
        }
        Command::Bench {
            mode,
            channels,
            reps,
            batch,
            inference_batch,
            repr_dim,
            precision,
            out,
        } => {
            let config = BenchConfig {
                channels,
                reps,
                batch,
                inference_batch,
                repr_dim,
                precision: match precision {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                },
                ..BenchConfig::default()
            };
            let mode = match mode {
                ModeArg::TrainStep => BenchMode::TrainStep,
                ModeArg::Inference => BenchMode::Inference,
            };
            let report = bench(&config, mode)?;
            print!("{}", report.to_csv());
            println!("log-log slope {:.3}", report.slope);
            if let Some(p) = out {
                write_atomic(&p, report.to_csv().as_bytes())?;
            }
        }
        Command::ExportSim {
            cfg,
            data,
            backbone,
            adapter,
            split,
            windows,
            correlation,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let bb = read_backbone(&backbone)?;
            let ad = read_adapter(&adapter)?;
            let (series, splits) = load_splits(&data, &cfg, &bb)?;
            let batch = match split {
                SplitArg::Train => &splits.train,
                SplitArg::Val => &splits.val,
                SplitArg::Test => &splits.test,
            };
            let mut paths = export_similarity(&ad, &bb, batch, &windows, &series.names, &out_dir)?;
            if correlation {
                let m = learned_correlation(&ad, &bb, &batch.select(&windows))?;
                let n = series.channels();
                for (k, &w) in windows.iter().enumerate() {
                    let path = out_dir.join(format!("corr_w{w}.csv"));
                    let one = cora::autodiff::Tensor::new(vec![n, n], m.data()[k * n * n..(k + 1) * n * n].to_vec())?;
                    write_matrix_csv(&path, &series.names, &one)?;
                    paths.push(path);
                }
            }
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CoraError>().map_or(1, CoraError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
