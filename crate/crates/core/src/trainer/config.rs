//! Training configuration: profiles, TOML files and dotted-key overrides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_pool::PoolConfig;
use crate::grpo::{AdvantageNorm, ClipConfig};
use crate::optim::AdamWConfig;
use crate::policy::{ModelShape, SamplerConfig};
use crate::task_env::{OpMix, Vocabulary, MAX_DIFFICULTY};
use crate::vbf::FilterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab: Vocabulary::standard().len(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            context: self.context,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Operand digit counts; problems are spread evenly across them.
    pub difficulties: Vec<u32>,
    pub ops: OpMix,
    pub train_size: usize,
    pub eval_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub iterations: u64,
    /// Prompts per iteration (B).
    pub batch_prompts: usize,
    /// Responses per prompt (G).
    pub group_size: usize,
    /// Self-correction runs on iterations divisible by this (P).
    pub stage2_period: u64,
    /// Optimizer steps per sampled batch.
    pub inner_epochs: usize,
    pub advantage_norm: AdvantageNorm,
    /// Re-snapshot the reference policy whenever a checkpoint is written.
    pub refresh_ref: bool,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Sampled attempts per evaluation problem (avg@k).
    pub eval_k: usize,
    /// Stop once greedy held-out accuracy reaches this; 0 disables.
    pub stop_at_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    /// Error records replayed per round.
    pub records: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartMode {
    None,
    /// Answer format only, with random numbers as answers.
    Format,
    /// Correct answers on problems kept apart from training and evaluation.
    Solutions,
}

/// Supervised steps run once before reinforcement learning. The result is
/// both the starting policy and the frozen reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStartConfig {
    pub mode: WarmStartMode,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Problems reserved for warm-start data.
    pub problems: usize,
    /// Fraction of each batch drawn as reflection examples.
    pub reflection_fraction: f64,
    /// Start from this saved policy instead of running the supervised steps.
    /// Empty means no file.
    pub init_policy: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Keep every prompt and pool wrong answers of all non-degenerate groups.
    pub no_vbf: bool,
    /// Stage-2 loss over every response token.
    pub no_mask: bool,
    /// Never run the self-correction stage.
    pub grpo_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Name of the profile the defaults came from.
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub trainer: LoopConfig,
    pub sampler: SamplerConfig,
    pub clip: ClipConfig,
    pub optim: AdamWConfig,
    pub vbf: FilterConfig,
    pub pool: PoolConfig,
    pub stage2: Stage2Config,
    pub warm_start: WarmStartConfig,
    pub ablation: AblationConfig,
}

impl TrainConfig {
    /// Small-model settings that train on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            profile: "desk".into(),
            seed: 0,
            model: ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                context: 512,
                init_std: 0.05,
            },
            task: TaskConfig {
                difficulties: vec![2],
                ops: OpMix::Add,
                train_size: 4000,
                eval_size: 200,
            },
            trainer: LoopConfig {
                iterations: 3000,
                batch_prompts: 8,
                group_size: 12,
                stage2_period: 5,
                inner_epochs: 1,
                advantage_norm: AdvantageNorm::MeanOnly,
                refresh_ref: false,
                checkpoint_every: 50,
                eval_every: 25,
                eval_k: 8,
                stop_at_accuracy: 0.0,
            },
            sampler: SamplerConfig::default(),
            clip: ClipConfig::default(),
            optim: AdamWConfig::default(),
            vbf: FilterConfig::default(),
            pool: PoolConfig::default(),
            stage2: Stage2Config { records: 8 },
            warm_start: WarmStartConfig {
                mode: WarmStartMode::Solutions,
                steps: 450,
                batch: 32,
                lr: 3e-3,
                problems: 1000,
                reflection_fraction: 0.25,
                init_policy: String::new(),
            },
            ablation: AblationConfig::default(),
        }
    }

    /// The full-scale hyperparameters, on the desk model.
    pub fn paper() -> Self {
        let mut c = TrainConfig::desk();
        c.profile = "paper".into();
        c.trainer.batch_prompts = 128;
        c.optim.lr = 1e-6;
        c.sampler.max_new_tokens = 10_000;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or paper)"))),
        }
    }

    /// Parses a TOML document. A top-level `profile` key picks the defaults;
    /// every other key overrides one field and must name an existing one.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let profile = match table.get("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut tree = to_tree(&TrainConfig::profile(&profile)?)?;
        merge(&mut tree, &table, "")?;
        from_tree(tree)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        TrainConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies `key=value` overrides such as `vbf.acc_low=0.4`. Values are
    /// read as TOML, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = to_tree(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            set_path(&mut tree, key, value)?;
        }
        from_tree(tree)
    }

    /// The disjoint training, evaluation and warm-start problem sets.
    pub fn splits(&self) -> Result<super::data::Splits> {
        let warm = match self.warm_start.mode {
            WarmStartMode::None => 0,
            _ => self.warm_start.problems,
        };
        super::data::build_splits(&self.task, warm, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.shape().validate()?;
        if !(self.model.init_std > 0.0) {
            return bad(format!("model.init_std must be > 0, got {}", self.model.init_std));
        }
        if self.task.difficulties.is_empty() {
            return bad("task.difficulties must not be empty".into());
        }
        if let Some(d) = self.task.difficulties.iter().find(|d| !(1..=MAX_DIFFICULTY).contains(*d)) {
            return bad(format!("task.difficulties entry {d} outside 1..={MAX_DIFFICULTY}"));
        }
        if self.task.train_size == 0 || self.task.eval_size == 0 {
            return bad("task.train_size and task.eval_size must be >= 1".into());
        }
        let t = &self.trainer;
        if t.batch_prompts == 0 {
            return bad("trainer.batch_prompts must be >= 1".into());
        }
        if t.group_size < 2 {
            return bad(format!("trainer.group_size must be >= 2, got {}", t.group_size));
        }
        if t.stage2_period == 0 {
            return bad("trainer.stage2_period must be >= 1".into());
        }
        if t.inner_epochs == 0 {
            return bad("trainer.inner_epochs must be >= 1".into());
        }
        if t.eval_k == 0 {
            return bad("trainer.eval_k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.stop_at_accuracy) {
            return bad(format!("trainer.stop_at_accuracy must be in [0, 1], got {}", t.stop_at_accuracy));
        }
        self.sampler.validate()?;
        self.clip.validate()?;
        self.optim.validate()?;
        self.vbf.validate()?;
        if self.vbf.n != t.group_size {
            return bad(format!(
                "vbf.n ({}) must equal trainer.group_size ({}): the filter scores the sampled group",
                self.vbf.n, t.group_size
            ));
        }
        self.pool.validate()?;
        if self.stage2.records == 0 {
            return bad("stage2.records must be >= 1".into());
        }
        let w = &self.warm_start;
        if w.mode != WarmStartMode::None {
            if w.steps == 0 || w.batch == 0 || w.problems == 0 {
                return bad("warm_start.steps, batch and problems must be >= 1".into());
            }
            if !(w.lr > 0.0) {
                return bad("warm_start.lr must be > 0".into());
            }
            if !(0.0..=1.0).contains(&w.reflection_fraction) {
                return bad("warm_start.reflection_fraction must be in [0, 1]".into());
            }
        }
        Ok(())
    }
}

fn to_tree(cfg: &TrainConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

fn from_tree(tree: toml::Table) -> Result<TrainConfig> {
    toml::Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(into: &mut toml::Table, from: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in from {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src, &path)?,
            (Some(slot), _) => *slot = v.clone(),
            (None, _) => return Err(Error::Config(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut parts = key.split('.').peekable();
    let mut node = tree;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let slot = node.get_mut(part).ok_or_else(unknown)?;
            if slot.is_table() {
                return Err(Error::Config(format!("config key {key:?} names a section, not a field")));
            }
            *slot = value;
            return Ok(());
        }
        node = match node.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}
