//! Experiment configuration, the end-to-end pipeline and ranking metrics.

pub mod alloc;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use config::{AblationConfig, DataConfig, ExperimentConfig, FedConfig, LlmConfig};
pub use metrics::{acc_at_k, mrr, MetricsReport, RankedPrediction, K_MAX};
pub use pipeline::{
    count_footprint, evaluate, evaluate_run_dir, prepare_data, run_ablation_suite, run_experiment,
    Footprint, ModelBundle, PreparedData, Report, RunOutcome, Timing,
};
