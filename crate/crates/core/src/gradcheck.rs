//! Central finite-difference checks of both policy losses on tiny models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::error_pool::ErrorRecord;
use crate::grpo::{grpo_loss_and_grad, ClipConfig, Group};
use crate::policy::{sequence_logprob_at, ModelShape, PolicyParams, Rollout};
use crate::self_correction::{scrpo_masked_loss_and_grad, ReflectionGroup, ReflectionPrompt, ReflectionSample};
use crate::task_env::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub step: f64,
    pub threshold: f64,
    /// Random directions probed per loss.
    pub directions: usize,
    pub beta: f64,
    pub temperature: f64,
    /// Scales the analytic gradient; anything but 1 simulates a broken
    /// backward pass.
    pub corrupt_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            threshold: 1e-4,
            directions: 4,
            beta: 0.01,
            temperature: 0.6,
            corrupt_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Grpo,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub seed: u64,
    pub loss: LossKind,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Shape used by the checks: about 2,800 parameters.
pub fn check_shape() -> ModelShape {
    ModelShape {
        vocab: Vocabulary::standard().len(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        context: 32,
    }
}

fn perturbed(p: &PolicyParams, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let data = p.as_slice().iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
    PolicyParams::from_vec(*p.shape(), data).expect("finite")
}

fn shifted(p: &PolicyParams, dir: &[f64], h: f64) -> PolicyParams {
    let data = p.as_slice().iter().zip(dir).map(|(x, d)| x + h * d).collect();
    PolicyParams::from_vec(*p.shape(), data).expect("finite")
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Rollouts whose recorded log-probabilities come from `old`, so the
/// importance ratios under the checked parameters differ from 1.
fn rollouts(old: &PolicyParams, prompt: &[TokenId], g: usize, t: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>> {
    let v = old.shape().vocab;
    (0..g)
        .map(|_| {
            let len = rng.random_range(1..7);
            let response = random_tokens(rng, len, v);
            Ok(Rollout {
                prompt_tokens: prompt.to_vec(),
                old_logprobs: sequence_logprob_at(old, prompt, &response, t)?,
                response_tokens: response,
                truncated: false,
            })
        })
        .collect()
}

fn probe<F>(params: &PolicyParams, grad: &[f64], cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, loss: F) -> Result<(f64, f64)>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let dir: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let numeric = (loss(&shifted(params, &dir, cfg.step))? - loss(&shifted(params, &dir, -cfg.step))?) / (2.0 * cfg.step);
    let analytic = cfg.corrupt_scale * grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>();
    Ok((analytic, numeric))
}

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Checks both losses for one seed.
pub fn check_seed(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<Probe>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PolicyParams::init(check_shape(), seed, 0.5)?;
    let old = perturbed(&params, &mut rng, 0.05);
    let reference = perturbed(&params, &mut rng, 0.05);
    let clip = ClipConfig {
        beta: cfg.beta,
        ..ClipConfig::default()
    };
    let v = params.shape().vocab;
    let t = cfg.temperature;
    let mut probes = Vec::new();

    let mut groups = Vec::new();
    for id in 0..2u64 {
        let plen = rng.random_range(1..8);
        let prompt = random_tokens(&mut rng, plen, v);
        let rs = rollouts(&old, &prompt, 4, t, &mut rng)?;
        let rewards = (0..4).map(|i| if i % 2 == 0 || rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        groups.push(Group::new(id, rs, rewards, Default::default())?);
    }
    let (_, grad, _) = grpo_loss_and_grad(&groups, &params, &reference, &clip, t)?;
    for _ in 0..cfg.directions {
        let (analytic, numeric) = probe(&params, &grad, cfg, &mut rng, |q| {
            Ok(grpo_loss_and_grad(&groups, q, &reference, &clip, t)?.0)
        })?;
        probes.push(Probe {
            seed,
            loss: LossKind::Grpo,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }

    let mut reflection = Vec::new();
    for id in 0..2u64 {
        let plen = rng.random_range(2..10);
        let tokens = random_tokens(&mut rng, plen, v);
        let rs = rollouts(&old, &tokens, 4, t, &mut rng)?;
        let samples = rs
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let n = r.response_tokens.len();
                // the last sample has an empty mask and must drop out
                let keep = i != 3;
                let mut mask: Vec<bool> = (0..n).map(|_| keep && rng.random_bool(0.5)).collect();
                if keep {
                    mask[rng.random_range(0..n)] = true;
                }
                let mask_size = mask.iter().filter(|&&m| m).count();
                ReflectionSample {
                    response_tokens: r.response_tokens,
                    old_logprobs: r.old_logprobs,
                    mask,
                    mask_size,
                    reward: (i % 2) as f64,
                    advantage: if i % 2 == 1 { 0.5 } else { -0.5 },
                }
            })
            .collect();
        reflection.push(ReflectionGroup {
            record: ErrorRecord {
                problem_id: id,
                prompt_text: String::new(),
                ground_truth: "0".into(),
                wrong_answer_text: String::new(),
                capture_iteration: 0,
                acc_at_capture: 0.5,
                consumed_count: 0,
            },
            prompt: ReflectionPrompt {
                problem_id: id,
                full_text: String::new(),
                tokens,
                sanitized: false,
            },
            samples,
        });
    }
    let (_, grad, _) = scrpo_masked_loss_and_grad(&reflection, &params, &reference, &clip, t)?;
    for _ in 0..cfg.directions {
        let (analytic, numeric) = probe(&params, &grad, cfg, &mut rng, |q| {
            Ok(scrpo_masked_loss_and_grad(&reflection, q, &reference, &clip, t)?.0)
        })?;
        probes.push(Probe {
            seed,
            loss: LossKind::Masked,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(probes)
}

/// Runs [`check_seed`] for every seed and summarizes.
pub fn gradcheck(seeds: &[u64], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut probes = Vec::new();
    for &s in seeds {
        probes.extend(check_seed(s, cfg)?);
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        params: check_shape().param_count(),
        passed: !probes.is_empty() && max_rel_error < cfg.threshold,
        probes,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_correct_backward_pass() {
        let r = gradcheck(&[1, 2], &GradcheckConfig::default()).unwrap();
        assert!(r.params <= 10_000);
        assert!(r.passed, "max rel error {}", r.max_rel_error);
        assert!(r.probes.iter().all(|p| p.analytic.abs() > 1e-8));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let cfg = GradcheckConfig {
            corrupt_scale: 1.01,
            ..GradcheckConfig::default()
        };
        let r = gradcheck(&[1], &cfg).unwrap();
        assert!(!r.passed);
    }
}
