//! Per-stage metrics records and the run event log.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Greedy accuracy of the freshly initialized policy.
    UntrainedEval,
    WarmStart,
    Grpo,
    SelfCorrection,
    Eval,
}

/// One line of `metrics.jsonl`. Fields that do not apply to a stage are
/// omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub pool_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    /// Whether the stage changed the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records_sampled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mask_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_greedy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_avg_at_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_k: Option<usize>,
}

impl MetricsRecord {
    pub fn new(iteration: u64, stage: Stage, pool_size: usize) -> Self {
        MetricsRecord {
            iteration,
            stage,
            pool_size,
            mean_reward: None,
            retained_fraction: None,
            loss: None,
            mean_kl: None,
            clip_fraction: None,
            mean_ratio: None,
            grad_norm: None,
            updated: None,
            records_sampled: None,
            correction_rate: None,
            mean_mask_size: None,
            dropped_samples: None,
            eval_greedy: None,
            eval_avg_at_k: None,
            eval_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub iteration: u64,
    pub kind: String,
    pub detail: String,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    crate::jsonl::read_lines(path)
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    crate::jsonl::read_lines(path)
}
