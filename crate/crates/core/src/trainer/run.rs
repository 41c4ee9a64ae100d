//! The two-stage training loop, checkpoints and resumption.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Splits;
use super::eval::{evaluate_policy, greedy_accuracy, EvalReport};
use super::metrics::{Event, MetricsRecord, Stage};
use super::warm::warm_start;
use crate::error::{Error, Result};
use crate::error_pool::{Admission, ErrorPool, ErrorRecord};
use crate::grpo::{grpo_loss_and_grad, Group, LossStats};
use crate::jsonl;
use crate::optim::{adamw_step, clip_grad_norm, load_optimizer, save_optimizer, OptimizerState};
use crate::policy::{load_policy, sample_group, save_policy, PolicyParams};
use crate::seed;
use crate::self_correction::{
    run_correction_round, scrpo_masked_loss_and_grad, CorrectionConfig, MaskMode, PolicyResponder, RoundReport,
};
use crate::task_env::{verify, Vocabulary};
use crate::vbf::{decide, write_decisions};

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 3;
const STREAM_ROLLOUT: u64 = 4;
const STREAM_STAGE2: u64 = 5;
const STREAM_EVAL: u64 = 6;

const STATE_VERSION: u32 = 1;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }
    /// Wall-clock durations, kept apart so the metrics stay reproducible.
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.jsonl")
    }
    pub fn decisions(&self) -> PathBuf {
        self.root.join("vbf.jsonl")
    }
    pub fn pool(&self) -> PathBuf {
        self.root.join("pool.jsonl")
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.bin")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointState {
    version: u32,
    iteration: u64,
    stopped: bool,
    metrics_len: u64,
    events_len: u64,
    decisions_len: u64,
    timing_len: u64,
    config: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Last completed iteration.
    pub iteration: u64,
    pub stopped_early: bool,
    pub final_eval: Option<EvalReport>,
}

#[derive(Serialize)]
struct Timing {
    iteration: u64,
    stage: Stage,
    seconds: f64,
}

struct Trainer {
    cfg: TrainConfig,
    paths: RunPaths,
    splits: Splits,
    params: PolicyParams,
    ref_params: PolicyParams,
    opt: OptimizerState,
    pool: ErrorPool,
    stopped: bool,
    last_eval: Option<EvalReport>,
}

fn admission(cfg: &TrainConfig) -> Admission {
    if cfg.ablation.no_vbf {
        Admission::NON_DEGENERATE
    } else {
        Admission {
            low: cfg.vbf.acc_low,
            high: cfg.vbf.acc_high,
        }
    }
}

fn file_len(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

fn truncate(path: &Path, len: u64) -> Result<()> {
    if path.exists() {
        fs::OpenOptions::new().write(true).open(path)?.set_len(len)?;
    } else if len > 0 {
        return Err(Error::Checkpoint(format!("{} is missing", path.display())));
    }
    Ok(())
}

impl Trainer {
    fn record(&self, r: &MetricsRecord) -> Result<()> {
        jsonl::append_line(&self.paths.metrics(), r)
    }

    fn event(&self, iteration: u64, kind: &str, detail: String) -> Result<()> {
        info!("iteration {iteration}: {kind} {detail}");
        jsonl::append_line(
            &self.paths.events(),
            &Event {
                iteration,
                kind: kind.into(),
                detail,
            },
        )
    }

    fn timed(&self, iteration: u64, stage: Stage, since: Instant) -> Result<()> {
        jsonl::append_line(
            &self.paths.timing(),
            &Timing {
                iteration,
                stage,
                seconds: since.elapsed().as_secs_f64(),
            },
        )
    }

    fn step(&mut self, mut grad: Vec<f64>, stats: &LossStats, rec: &mut MetricsRecord) -> Result<()> {
        rec.loss = Some(stats.loss);
        rec.mean_kl = stats.mean_token_kl;
        rec.clip_fraction = Some(stats.clip_fraction);
        rec.mean_ratio = Some(stats.mean_ratio);
        if stats.groups == 0 {
            rec.updated = Some(false);
            return Ok(());
        }
        rec.grad_norm = Some(clip_grad_norm(&mut grad, self.cfg.optim.max_grad_norm));
        adamw_step(self.params.as_mut_slice(), &grad, &mut self.opt, &self.cfg.optim)?;
        if !self.params.all_finite() {
            return Err(Error::Numerical("parameters became non-finite after an update".into()));
        }
        rec.updated = Some(true);
        Ok(())
    }

    fn stage1(&mut self, t: u64) -> Result<MetricsRecord> {
        let c = &self.cfg;
        let g = c.trainer.group_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(c.seed, STREAM_BATCH, t));
        let train = &self.splits.train;
        let picks = rand::seq::index::sample(&mut rng, train.len(), c.trainer.batch_prompts.min(train.len()));
        let rollout_seed = seed::derive(c.seed, STREAM_ROLLOUT, t);
        let vocab = Vocabulary::standard();
        let mut groups = Vec::new();
        let mut decisions = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        for (j, i) in picks.iter().enumerate() {
            let p = &train[i];
            let rollouts = sample_group(&self.params, &p.policy_prompt(), g, &c.sampler, seed::derive(rollout_seed, 0, j as u64))?;
            let texts: Vec<String> = rollouts.iter().map(|r| vocab.decode(&r.response_tokens)).collect();
            let correct: Vec<bool> = texts.iter().map(|s| verify(p, s).correct).collect();
            let rewards: Vec<f64> = correct.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            reward_sum += rewards.iter().sum::<f64>();
            reward_n += rewards.len();
            let mut d = decide(p.id, &correct, &c.vbf)?;
            if c.ablation.no_vbf {
                d.retained = d.correct_count > 0 && d.correct_count < g;
            }
            if d.retained {
                for (text, ok) in texts.iter().zip(&correct) {
                    if !ok {
                        self.pool.insert(ErrorRecord {
                            problem_id: p.id,
                            prompt_text: p.prompt_text.clone(),
                            ground_truth: p.ground_truth.clone(),
                            wrong_answer_text: text.clone(),
                            capture_iteration: t,
                            acc_at_capture: d.acc,
                            consumed_count: 0,
                        })?;
                    }
                }
                groups.push(Group::new(p.id, rollouts, rewards, c.trainer.advantage_norm)?);
            }
            decisions.push(d);
        }
        write_decisions(&self.paths.decisions(), &decisions)?;
        let mut rec = MetricsRecord::new(t, Stage::Grpo, self.pool.len());
        rec.mean_reward = Some(reward_sum / reward_n.max(1) as f64);
        rec.retained_fraction = Some(groups.len() as f64 / picks.len() as f64);
        if groups.is_empty() {
            rec.updated = Some(false);
            self.event(t, "no_update", "the filter retained no prompt".into())?;
            return Ok(rec);
        }
        let temperature = self.cfg.sampler.temperature;
        for _ in 0..self.cfg.trainer.inner_epochs {
            let (_, grad, stats) = grpo_loss_and_grad(&groups, &self.params, &self.ref_params, &self.cfg.clip, temperature)?;
            self.step(grad, &stats, &mut rec)?;
        }
        Ok(rec)
    }

    fn stage2(&mut self, t: u64) -> Result<Option<MetricsRecord>> {
        let c = &self.cfg;
        let cc = CorrectionConfig {
            records: c.stage2.records,
            group_size: c.trainer.group_size,
            mask: if c.ablation.no_mask { MaskMode::FullResponse } else { MaskMode::Reflection },
        };
        let mut responder = PolicyResponder {
            params: &self.params,
            sampler: c.sampler,
        };
        let window = self.params.shape().context;
        let round = run_correction_round(&mut self.pool, &mut responder, &cc, window, seed::derive(c.seed, STREAM_STAGE2, t));
        let (groups, skipped) = match round {
            Err(Error::EmptyPool) => {
                self.event(t, "stage2_skipped", "error pool is empty".into())?;
                return Ok(None);
            }
            other => other?,
        };
        let mut rec = MetricsRecord::new(t, Stage::SelfCorrection, self.pool.len());
        let (loss, grad, stats) = scrpo_masked_loss_and_grad(
            &groups,
            &self.params,
            &self.ref_params,
            &self.cfg.clip,
            self.cfg.sampler.temperature,
        )?;
        let report = RoundReport::from_groups(t / self.cfg.trainer.stage2_period, &groups, skipped, loss);
        if stats.groups == 0 {
            self.event(t, "stage2_no_update", format!("{} samples had an empty mask", report.dropped_samples))?;
        }
        rec.mean_reward = Some(report.correction_rate);
        rec.records_sampled = Some(report.records_sampled);
        rec.correction_rate = Some(report.correction_rate);
        rec.mean_mask_size = Some(report.mean_mask_size);
        rec.dropped_samples = Some(report.dropped_samples);
        self.step(grad, &stats, &mut rec)?;
        Ok(Some(rec))
    }

    fn evaluate(&mut self, t: u64) -> Result<MetricsRecord> {
        let c = &self.cfg;
        let report = evaluate_policy(
            &self.params,
            &self.splits.eval,
            c.trainer.eval_k,
            c.sampler,
            seed::derive(c.seed, STREAM_EVAL, t),
        )?;
        let mut rec = MetricsRecord::new(t, Stage::Eval, self.pool.len());
        rec.eval_greedy = Some(report.greedy_accuracy);
        rec.eval_avg_at_k = Some(report.avg_at_k);
        rec.eval_k = Some(report.k);
        self.last_eval = Some(report);
        Ok(rec)
    }

    fn checkpoint(&self, t: u64) -> Result<()> {
        let dir = self.paths.checkpoint();
        let tmp = self.paths.root.join("checkpoint.tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        save_policy(&tmp.join("policy.bin"), &self.params)?;
        save_policy(&tmp.join("ref.bin"), &self.ref_params)?;
        save_optimizer(&tmp.join("optimizer.bin"), &self.opt)?;
        self.pool.persist(&tmp.join("pool.jsonl"))?;
        let state = CheckpointState {
            version: STATE_VERSION,
            iteration: t,
            stopped: self.stopped,
            metrics_len: file_len(&self.paths.metrics()),
            events_len: file_len(&self.paths.events()),
            decisions_len: file_len(&self.paths.decisions()),
            timing_len: file_len(&self.paths.timing()),
            config: self.cfg.to_toml()?,
        };
        fs::write(tmp.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        Ok(())
    }

    fn run(mut self, start: u64, halt_after: Option<u64>) -> Result<TrainOutcome> {
        let c = self.cfg.clone();
        let end = halt_after.map_or(c.trainer.iterations, |h| h.min(c.trainer.iterations));
        let mut t = start;
        while !self.stopped && t < end {
            t += 1;
            let clock = Instant::now();
            let rec = match self.stage1(t) {
                Ok(r) => r,
                Err(e) => return self.abort(t, e),
            };
            self.record(&rec)?;
            self.timed(t, Stage::Grpo, clock)?;
            if !c.ablation.grpo_only && t.is_multiple_of(c.trainer.stage2_period) {
                let clock = Instant::now();
                match self.stage2(t) {
                    Ok(Some(rec)) => {
                        self.record(&rec)?;
                        self.timed(t, Stage::SelfCorrection, clock)?;
                    }
                    Ok(None) => {}
                    Err(e) => return self.abort(t, e),
                }
            }
            let scheduled = c.trainer.eval_every > 0 && t.is_multiple_of(c.trainer.eval_every);
            if scheduled || t == c.trainer.iterations {
                let clock = Instant::now();
                let rec = self.evaluate(t)?;
                self.record(&rec)?;
                self.timed(t, Stage::Eval, clock)?;
                let greedy = rec.eval_greedy.unwrap_or(0.0);
                if c.trainer.stop_at_accuracy > 0.0 && greedy >= c.trainer.stop_at_accuracy {
                    self.stopped = true;
                    self.event(t, "early_stop", format!("greedy accuracy {greedy} reached the target"))?;
                }
            }
            if c.trainer.checkpoint_every > 0 && (t.is_multiple_of(c.trainer.checkpoint_every) || self.stopped) {
                if c.trainer.refresh_ref {
                    self.ref_params = self.params.clone();
                }
                self.checkpoint(t)?;
            }
        }
        save_policy(&self.paths.policy(), &self.params)?;
        self.pool.persist(&self.paths.pool())?;
        Ok(TrainOutcome {
            params: self.params,
            iteration: t,
            stopped_early: self.stopped,
            final_eval: self.last_eval,
        })
    }

    fn abort(&self, t: u64, e: Error) -> Result<TrainOutcome> {
        warn!("aborting at iteration {t}: {e}");
        self.event(t, "aborted", e.to_string())?;
        Err(e)
    }
}

/// The freshly initialized policy a run with `cfg` starts from, before any
/// warm start.
pub fn initial_policy(cfg: &TrainConfig) -> Result<PolicyParams> {
    PolicyParams::init(cfg.model.shape(), seed::derive(cfg.seed, STREAM_INIT, 0), cfg.model.init_std)
}

/// Trains from scratch, writing everything into `out`. Existing run files in
/// `out` are replaced.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    train_until(cfg, out, None)
}

/// Like [`train`], but returns after iteration `halt_after` as if the process
/// had been stopped there. The run can be continued with [`resume`].
pub fn train_until(cfg: &TrainConfig, out: &Path, halt_after: Option<u64>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(out);
    fs::create_dir_all(out)?;
    for f in [paths.metrics(), paths.events(), paths.timing(), paths.decisions()] {
        if f.exists() {
            fs::remove_file(f)?;
        }
    }
    if paths.checkpoint().exists() {
        fs::remove_dir_all(paths.checkpoint())?;
    }
    fs::write(paths.config(), cfg.to_toml()?)?;

    let splits = cfg.splits()?;
    let mut params = initial_policy(cfg)?;
    let pool = ErrorPool::new(cfg.pool, admission(cfg))?;
    let clock = Instant::now();
    let mut solver = PolicyResponder {
        params: &params,
        sampler: cfg.sampler,
    };
    let (_, untrained) = greedy_accuracy(&mut solver, &splits.eval)?;
    let mut rec = MetricsRecord::new(0, Stage::UntrainedEval, 0);
    rec.eval_greedy = Some(untrained);
    jsonl::append_line(&paths.metrics(), &rec)?;

    if !cfg.warm_start.init_policy.is_empty() {
        let loaded = load_policy(Path::new(&cfg.warm_start.init_policy))?;
        if loaded.shape() != params.shape() {
            return Err(Error::Config(format!(
                "{} does not match the configured model shape",
                cfg.warm_start.init_policy
            )));
        }
        params = loaded;
    } else if let Some(report) = warm_start(&mut params, &splits.warm, &cfg.warm_start, cfg.optim.max_grad_norm, cfg.seed)? {
        let mut rec = MetricsRecord::new(0, Stage::WarmStart, 0);
        rec.loss = Some(report.last_loss);
        rec.updated = Some(true);
        jsonl::append_line(&paths.metrics(), &rec)?;
    }
    let ref_params = params.clone();
    let mut trainer = Trainer {
        cfg: cfg.clone(),
        paths,
        splits,
        opt: OptimizerState::new(params.len()),
        ref_params,
        params,
        pool,
        stopped: false,
        last_eval: None,
    };
    let rec = trainer.evaluate(0)?;
    trainer.record(&rec)?;
    trainer.timed(0, Stage::WarmStart, clock)?;
    trainer.run(0, halt_after)
}

/// Continues a run from the checkpoint in `out`. Only `trainer.iterations`
/// may differ from the configuration the run was started with.
pub fn resume(cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(out);
    let dir = paths.checkpoint();
    let state_path = dir.join("state.json");
    let text = fs::read_to_string(&state_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", state_path.display())))?;
    let state: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", state_path.display())))?;
    if state.version != STATE_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint state version {} is not supported (expected {STATE_VERSION})",
            state.version
        )));
    }
    let saved = TrainConfig::from_toml(&state.config)?;
    let mut comparable = cfg.clone();
    comparable.trainer.iterations = saved.trainer.iterations;
    if comparable != saved {
        return Err(Error::Config(
            "configuration differs from the checkpointed run beyond trainer.iterations".into(),
        ));
    }
    let params = load_policy(&dir.join("policy.bin"))?;
    let ref_params = load_policy(&dir.join("ref.bin"))?;
    if *params.shape() != cfg.model.shape() || *ref_params.shape() != cfg.model.shape() {
        return Err(Error::Checkpoint("checkpointed model shape does not match the configuration".into()));
    }
    let opt = load_optimizer(&dir.join("optimizer.bin"))?;
    if opt.m.len() != params.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    let pool = ErrorPool::load(&dir.join("pool.jsonl"), cfg.pool, admission(cfg))?;
    truncate(&paths.metrics(), state.metrics_len)?;
    truncate(&paths.events(), state.events_len)?;
    truncate(&paths.decisions(), state.decisions_len)?;
    truncate(&paths.timing(), state.timing_len)?;
    fs::write(paths.config(), cfg.to_toml()?)?;
    let trainer = Trainer {
        cfg: cfg.clone(),
        paths,
        splits: cfg.splits()?,
        params,
        ref_params,
        opt,
        pool,
        stopped: state.stopped,
        last_eval: None,
    };
    info!("resuming after iteration {}", state.iteration);
    trainer.run(state.iteration, None)
}
