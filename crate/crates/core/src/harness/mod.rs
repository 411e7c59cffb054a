//! Training loop, filtered ranking evaluation, persistence and study drivers.

mod checkpoint;
mod config;
mod eval;
mod metrics;
mod model;
mod optim;
mod studies;
mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use config::{
    CheckpointConfig, DatasetConfig, Dtype, LossConfig, OptimConfig, RunConfig, TokenizerConfig,
};
pub use eval::{evaluate, filtered_rank, rank_queries, raw_rank, KnownAnswers, RankingReport};
pub use metrics::{read_metrics, same_stream, MetricsRow, MetricsWriter};
pub use model::{Heads, Model};
pub use optim::AdamW;
pub use studies::{
    format_table, gradcheck_config, gradcheck_suite, run_ablation, run_config,
    run_joint_op_study, sweep_k, sweep_negatives, GradCheckEntry, StudyRow, Variant, JOINT_OPS,
};
pub use train::{train, TrainOutcome, Trainer};
