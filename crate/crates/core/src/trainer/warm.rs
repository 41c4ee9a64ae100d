//! Supervised warm start that teaches the answer and reflection formats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{WarmStartConfig, WarmStartMode};
use crate::error::{Error, Result};
use crate::error_pool::ErrorRecord;
use crate::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
use crate::policy::{objective_gradient, PolicyParams, TeacherBatch};
use crate::seed;
use crate::self_correction::compose_prompt;
use crate::task_env::{Problem, TokenId, Vocabulary, EOS};

/// Target text for a direct answer.
pub fn answer_text(value: &str) -> String {
    format!("Answer: {value}")
}

/// Target text for a correction of `wrong` to `right` on `question`.
pub fn reflection_text(question: &str, wrong: &str, right: &str) -> String {
    let expr = question.strip_suffix("=?").unwrap_or(question);
    format!("**Analysis:** {expr} is not {wrong}\n**Corrected Solution:** Answer: {right}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn encode_target(text: &str) -> Result<Vec<TokenId>> {
    let mut t = Vocabulary::standard().encode(text)?;
    t.push(EOS);
    Ok(t)
}

/// A number with as many digits as a typical answer to `p`, but random.
fn decoy<R: Rng>(p: &Problem, rng: &mut R) -> String {
    let len = p.ground_truth.trim_start_matches('-').len().max(1) as u32;
    let hi = 10i64.pow(len);
    let lo = if len == 1 { 0 } else { 10i64.pow(len - 1) };
    rng.random_range(lo..hi).to_string()
}

fn example<R: Rng>(p: &Problem, cfg: &WarmStartConfig, reflect: bool, rng: &mut R) -> Result<TeacherBatch> {
    let right = match cfg.mode {
        WarmStartMode::Solutions => p.ground_truth.clone(),
        _ => decoy(p, rng),
    };
    if !reflect {
        return Ok(TeacherBatch {
            prompt: p.policy_prompt(),
            responses: vec![encode_target(&answer_text(&right))?],
        });
    }
    let mut wrong = decoy(p, rng);
    while wrong == p.ground_truth {
        wrong = decoy(p, rng);
    }
    let record = ErrorRecord {
        problem_id: p.id,
        prompt_text: p.prompt_text.clone(),
        ground_truth: p.ground_truth.clone(),
        wrong_answer_text: answer_text(&wrong),
        capture_iteration: 0,
        acc_at_capture: 0.5,
        consumed_count: 0,
    };
    Ok(TeacherBatch {
        prompt: compose_prompt(&record)?.tokens,
        responses: vec![encode_target(&reflection_text(&p.prompt_text, &wrong, &right))?],
    })
}

/// Runs `cfg.steps` steps of token-level cross-entropy on `problems`.
/// No-op when the mode is `None`.
pub fn warm_start(
    params: &mut PolicyParams,
    problems: &[Problem],
    cfg: &WarmStartConfig,
    max_grad_norm: f64,
    master: u64,
) -> Result<Option<WarmStartReport>> {
    if cfg.mode == WarmStartMode::None {
        return Ok(None);
    }
    if problems.is_empty() {
        return Err(Error::Config("warm start needs at least one problem".into()));
    }
    let opt = AdamWConfig {
        lr: cfg.lr,
        max_grad_norm,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(params.len());
    let n_reflect = (cfg.batch as f64 * cfg.reflection_fraction).round() as usize;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master, 2, step as u64));
        let batches = (0..cfg.batch)
            .map(|i| {
                let p = &problems[rng.random_range(0..problems.len())];
                example(p, cfg, i < n_reflect, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (nll, mut grad) = objective_gradient(params, &batches, 1.0, |lp| {
            let m = lp.len() as f64;
            let mut value = 0.0;
            let adj = lp
                .iter()
                .map(|resp| {
                    resp.iter()
                        .map(|toks| {
                            let w = 1.0 / (m * toks.len() as f64);
                            value -= w * toks.iter().sum::<f64>();
                            vec![-w; toks.len()]
                        })
                        .collect()
                })
                .collect();
            (value, adj)
        })?;
        clip_grad_norm(&mut grad, opt.max_grad_norm);
        adamw_step(params.as_mut_slice(), &grad, &mut state, &opt)?;
        if step == 0 {
            first_loss = nll;
        }
        last_loss = nll;
    }
    Ok(Some(WarmStartReport {
        steps: cfg.steps,
        first_loss,
        last_loss,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sequence_logprob, ModelShape};
    use crate::task_env::{generate_problems_with, verify_against, OpMix};

    #[test]
    fn targets_verify() {
        assert!(verify_against("57", &answer_text("57")).correct);
        let r = reflection_text("12+45=?", "58", "57");
        assert!(r.starts_with("**Analysis:** 12+45 is not 58\n"));
        assert_eq!(crate::self_correction::correction_reward("57", &r), 1.0);
        assert_eq!(crate::self_correction::find_reflection_mask(&Vocabulary::standard().encode(&r).unwrap()).1, 17);
    }

    #[test]
    fn warm_start_lowers_the_loss() {
        let shape = ModelShape {
            vocab: Vocabulary::standard().len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            context: 512,
        };
        let mut params = PolicyParams::init(shape, 1, 0.05).unwrap();
        let problems = generate_problems_with(3, 50, 1, OpMix::Add).unwrap();
        let cfg = WarmStartConfig {
            mode: WarmStartMode::Format,
            steps: 30,
            batch: 4,
            lr: 1e-2,
            problems: 50,
            reflection_fraction: 0.25,
            init_policy: String::new(),
        };
        let before = sequence_logprob(&params, &problems[0].policy_prompt(), &encode_target("Answer: 3").unwrap())
            .unwrap()
            .iter()
            .sum::<f64>();
        let report = warm_start(&mut params, &problems, &cfg, 1.0, 0).unwrap().unwrap();
        assert!(report.last_loss < report.first_loss);
        let after = sequence_logprob(&params, &problems[0].policy_prompt(), &encode_target("Answer: 3").unwrap())
            .unwrap()
            .iter()
            .sum::<f64>();
        assert!(after > before);
        let none = WarmStartConfig {
            mode: WarmStartMode::None,
            ..cfg
        };
        assert!(warm_start(&mut params, &problems, &none, 1.0, 0).unwrap().is_none());
    }
}
