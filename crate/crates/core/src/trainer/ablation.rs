//! Side-by-side runs that switch off one ingredient at a time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AblationConfig, TrainConfig, WarmStartMode};
use super::run::{initial_policy, train};
use super::warm::warm_start;
use crate::error::Result;
use crate::policy::save_policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scrpo,
    NoVbf,
    NoMask,
    GrpoOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Scrpo, Variant::NoVbf, Variant::NoMask, Variant::GrpoOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scrpo => "scrpo",
            Variant::NoVbf => "no_vbf",
            Variant::NoMask => "no_mask",
            Variant::GrpoOnly => "grpo_only",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn toggles(self) -> AblationConfig {
        AblationConfig {
            no_vbf: self == Variant::NoVbf,
            no_mask: self == Variant::NoMask,
            grpo_only: self == Variant::GrpoOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub iterations: u64,
    pub eval_greedy: f64,
    pub eval_avg_at_k: f64,
}

/// Trains every variant from the same base configuration (seeds included)
/// into `out/<variant>` and reports the final held-out scores.
///
/// The warm start does not depend on the variant, so it runs once and is
/// saved as `out/warm_start.bin` for all of them.
pub fn run_ablation(base: &TrainConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationResult>> {
    let mut base = base.clone();
    base.validate()?;
    if base.warm_start.mode != WarmStartMode::None && base.warm_start.init_policy.is_empty() {
        let mut params = initial_policy(&base)?;
        let splits = base.splits()?;
        warm_start(&mut params, &splits.warm, &base.warm_start, base.optim.max_grad_norm, base.seed)?;
        std::fs::create_dir_all(out)?;
        let path = out.join("warm_start.bin");
        save_policy(&path, &params)?;
        base.warm_start.init_policy = path.to_string_lossy().into_owned();
    }
    variants
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.ablation = v.toggles();
            let outcome = train(&cfg, &out.join(v.name()))?;
            let eval = outcome.final_eval.as_ref();
            Ok(AblationResult {
                variant: v,
                iterations: outcome.iteration,
                eval_greedy: eval.map_or(0.0, |e| e.greedy_accuracy),
                eval_avg_at_k: eval.map_or(0.0, |e| e.avg_at_k),
            })
        })
        .collect()
}
