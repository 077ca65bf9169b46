//! Training, evaluation, ablation, timing and export on top of the adapter.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod evaluate;
pub mod export;
pub mod fit;
pub mod metrics;
pub mod suite;

pub use ablate::{ablate, ablation_rows, AblationRow, AblationTable};
pub use bench::{bench, least_squares_slope, BenchConfig, BenchMode, BenchReport, BenchRow, Precision};
pub use config::TrainConfig;
pub use evaluate::{evaluate, evaluate_backbone, predict};
pub use export::{export_similarity, learned_correlation, sign_agreement, similarity_matrices, write_matrix_csv};
pub use fit::{fit, FitOutput};
pub use metrics::{EpochMetrics, EvalMetrics, MetricsReport};
pub use suite::{pretrained_backbone, pretraining_corpus, Regime};
