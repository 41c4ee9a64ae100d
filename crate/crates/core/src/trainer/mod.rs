//! Orchestration of the two-stage loop: configuration, data, warm start,
//! training, evaluation, checkpoints and ablations.

mod ablation;
mod config;
mod data;
mod eval;
mod metrics;
mod run;
mod warm;

pub use ablation::{run_ablation, AblationResult, Variant};
pub use config::{
    AblationConfig, LoopConfig, ModelConfig, Stage2Config, TaskConfig, TrainConfig, WarmStartConfig, WarmStartMode,
};
pub use data::{build_splits, Splits};
pub use eval::{evaluate_avg_at_k, evaluate_policy, greedy_accuracy, EvalReport, Solver};
pub use metrics::{read_events, read_metrics, Event, MetricsRecord, Stage};
pub use run::{initial_policy, resume, train, train_until, RunPaths, TrainOutcome};
pub use warm::{answer_text, reflection_text, warm_start, WarmStartReport};
