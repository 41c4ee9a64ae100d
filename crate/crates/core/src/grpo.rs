//! Group-relative advantages, the clipped importance-weighted surrogate with a
//! per-token KL penalty, and its gradient through the policy.
//!
//! For a group of `G` responses to one prompt with rewards `r_i`, every token
//! of response `i` receives the advantage `A_i = r_i - mean(r)`. The
//! per-token objective is
//!
//! ```text
//! min(ratio * A, clip(ratio, 1 - eps_low, 1 + eps_high) * A) - beta * kl
//! ratio = pi_theta(token) / pi_old(token)
//! kl    = rho - ln(rho) - 1,   rho = pi_ref(token) / pi_theta(token)
//! ```
//!
//! Token terms are averaged within a response, responses are averaged within
//! their group, and groups are averaged over the batch. The loss is the
//! negation of that objective, so minimizing the loss maximizes the objective.
//!
//! The same machinery evaluates the reflection-masked loss of the
//! self-correction stage: a response carrying a mask averages only over its
//! masked tokens and is skipped entirely when the mask is empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GroupTrace, PolicyParams, Rollout};
use crate::task_env::TokenId;

/// Whether advantages are additionally divided by the group's standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    #[default]
    MeanOnly,
    GroupStd,
}

/// `r_i - mean(r)` for every member of the group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    group_advantages_with(rewards, AdvantageNorm::MeanOnly)
}

pub fn group_advantages_with(rewards: &[f64], norm: AdvantageNorm) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "a group needs at least 2 responses, got {}",
            rewards.len()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numerical(format!("reward {i} is not finite")));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    Ok(match norm {
        AdvantageNorm::MeanOnly => centered,
        AdvantageNorm::GroupStd => {
            let std = (centered.iter().map(|a| a * a).sum::<f64>() / g).sqrt();
            if std == 0.0 {
                centered
            } else {
                centered.iter().map(|a| a / std).collect()
            }
        }
    })
}

/// Per-token KL estimate `rho - ln(rho) - 1` with `rho = exp(logp_ref - logp_theta)`.
pub fn token_kl_estimate(logp_theta: f64, logp_ref: f64) -> Result<f64> {
    if !logp_theta.is_finite() || !logp_ref.is_finite() {
        return Err(Error::Numerical(format!(
            "KL estimate needs finite log-probabilities, got {logp_theta} and {logp_ref}"
        )));
    }
    Ok(kl_term(logp_ref - logp_theta))
}

/// `rho - ln(rho) - 1` from `ln(rho)`; `expm1` keeps it exact near `rho = 1`.
#[inline]
fn kl_term(log_rho: f64) -> f64 {
    (log_rho.exp_m1() - log_rho).max(0.0)
}

/// Sequence-level estimate `log pi_theta(o|q) - log pi_ref(o|q)` for a response
/// sampled from `pi_theta`. Diagnostics only; the loss uses the token form.
pub fn sequence_kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Result<f64> {
    if logp_theta.len() != logp_ref.len() {
        return Err(Error::Dimension {
            what: "sequence KL inputs",
            expected: logp_theta.len(),
            got: logp_ref.len(),
        });
    }
    Ok(logp_theta.iter().zip(logp_ref).map(|(a, b)| a - b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: 0.2,
            eps_high: 0.27,
            beta: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::Config(format!("clip.eps_low must be in (0, 1), got {}", self.eps_low)));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::Config(format!("clip.eps_high must be > 0, got {}", self.eps_high)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("clip.beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

/// `min(ratio * A, clip(ratio) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, cfg: &ClipConfig) -> f64 {
    (ratio * advantage).min(cfg.clip(ratio) * advantage)
}

/// Value of one token's objective and its derivative with respect to the
/// current log-probability of that token.
#[derive(Debug, Clone, Copy)]
pub struct TokenTerm {
    pub value: f64,
    pub grad: f64,
    pub ratio: f64,
    pub clipped: bool,
    pub kl: Option<f64>,
}

pub fn token_term(
    logp_new: f64,
    logp_old: f64,
    logp_ref: Option<f64>,
    advantage: f64,
    cfg: &ClipConfig,
) -> TokenTerm {
    let ratio = (logp_new - logp_old).exp();
    let unclipped = ratio * advantage;
    let clipped_value = cfg.clip(ratio) * advantage;
    let (mut value, mut grad, clipped) = if unclipped <= clipped_value {
        (unclipped, unclipped, false)
    } else {
        (clipped_value, 0.0, true)
    };
    let kl = logp_ref.map(|lr| {
        let log_rho = lr - logp_new;
        let kl = kl_term(log_rho);
        // d/d(logp_new) of (rho - ln rho - 1) is 1 - rho
        value -= cfg.beta * kl;
        grad -= cfg.beta * (-log_rho.exp_m1());
        kl
    });
    TokenTerm {
        value,
        grad,
        ratio,
        clipped,
        kl,
    }
}

/// One scored response inside a [`PolicyGroup`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub response: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub advantage: f64,
    /// `None` weights every token; `Some(mask)` restricts the average to the
    /// masked tokens.
    pub mask: Option<Vec<bool>>,
}

impl PolicySample {
    /// Number of tokens the sample contributes; 0 means excluded.
    pub fn weight_count(&self) -> usize {
        match &self.mask {
            None => self.response.len(),
            Some(m) => m.iter().filter(|&&b| b).count(),
        }
    }
}

/// Responses to one prompt, with their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub samples: Vec<PolicySample>,
}

impl PolicyGroup {
    pub fn contributes(&self) -> bool {
        self.samples.iter().any(|s| s.weight_count() > 0)
    }
}

/// Aggregate diagnostics of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_token_kl: Option<f64>,
    pub tokens: usize,
    pub groups: usize,
    pub included_samples: usize,
    pub excluded_samples: usize,
}

#[derive(Default)]
struct StatsAcc {
    ratio_sum: f64,
    clipped: usize,
    kl_sum: f64,
    kl_seen: bool,
    tokens: usize,
    included: usize,
    excluded: usize,
}

/// Objective contribution of one group scaled by `scale`, and the adjoints
/// of `-scale * objective` (that is, of the loss) per response token.
fn group_loss_terms(
    group: &PolicyGroup,
    new_lp: &[Vec<f64>],
    ref_lp: Option<&[Vec<f64>]>,
    cfg: &ClipConfig,
    scale: f64,
    acc: &mut StatsAcc,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if new_lp.len() != group.samples.len() {
        return Err(Error::Dimension {
            what: "group log-probabilities",
            expected: group.samples.len(),
            got: new_lp.len(),
        });
    }
    let g = group.samples.len() as f64;
    let mut loss = 0.0;
    let mut adjoints = Vec::with_capacity(group.samples.len());
    for (j, (s, lp)) in group.samples.iter().zip(new_lp).enumerate() {
        let n = s.response.len();
        if lp.len() != n || s.old_logprobs.len() != n {
            return Err(Error::Dimension {
                what: "response log-probabilities",
                expected: n,
                got: lp.len().min(s.old_logprobs.len()),
            });
        }
        if let Some(m) = &s.mask {
            if m.len() != n {
                return Err(Error::Dimension {
                    what: "response mask",
                    expected: n,
                    got: m.len(),
                });
            }
        }
        let count = s.weight_count();
        let mut adj = vec![0.0; n];
        if count == 0 {
            acc.excluded += 1;
            adjoints.push(adj);
            continue;
        }
        acc.included += 1;
        let w = scale / (g * count as f64);
        for t in 0..n {
            if let Some(m) = &s.mask {
                if !m[t] {
                    continue;
                }
            }
            let lr = ref_lp.map(|r| r[j][t]);
            let term = token_term(lp[t], s.old_logprobs[t], lr, s.advantage, cfg);
            loss -= w * term.value;
            adj[t] = -w * term.grad;
            acc.ratio_sum += term.ratio;
            acc.clipped += term.clipped as usize;
            acc.tokens += 1;
            if let Some(k) = term.kl {
                acc.kl_sum += k;
                acc.kl_seen = true;
            }
        }
        adjoints.push(adj);
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss in group {}", group.id)));
    }
    Ok((loss, adjoints))
}

impl StatsAcc {
    fn finish(self, loss: f64, groups: usize) -> LossStats {
        let t = self.tokens.max(1) as f64;
        LossStats {
            loss,
            mean_ratio: if self.tokens == 0 { 1.0 } else { self.ratio_sum / t },
            clip_fraction: self.clipped as f64 / t,
            mean_token_kl: self.kl_seen.then(|| self.kl_sum / t),
            tokens: self.tokens,
            groups,
            included_samples: self.included,
            excluded_samples: self.excluded,
        }
    }
}

/// Loss value and per-token adjoints from precomputed log-probabilities
/// (`[group][sample][token]`). Only groups with at least one contributing
/// sample count toward the batch average.
pub fn surrogate_loss(
    groups: &[PolicyGroup],
    new_logprobs: &[Vec<Vec<f64>>],
    ref_logprobs: Option<&[Vec<Vec<f64>>]>,
    cfg: &ClipConfig,
) -> Result<(f64, Vec<Vec<Vec<f64>>>, LossStats)> {
    if new_logprobs.len() != groups.len() {
        return Err(Error::Dimension {
            what: "batch log-probabilities",
            expected: groups.len(),
            got: new_logprobs.len(),
        });
    }
    let active = groups.iter().filter(|g| g.contributes()).count();
    let scale = if active == 0 { 0.0 } else { 1.0 / active as f64 };
    let mut acc = StatsAcc::default();
    let mut loss = 0.0;
    let mut adjoints = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        let r = ref_logprobs.map(|r| r[i].as_slice());
        let (l, a) = group_loss_terms(g, &new_logprobs[i], r, cfg, scale, &mut acc)?;
        loss += l;
        adjoints.push(a);
    }
    Ok((loss, adjoints, acc.finish(loss, active)))
}

/// Loss, gradient and diagnostics of the clipped surrogate over a batch of
/// groups, evaluated through the policy network.
///
/// `temperature` must be the sampling temperature used to record
/// `old_logprobs`, so that the ratios are exactly 1 before any update. The
/// reference policy is only evaluated when `cfg.beta > 0`.
pub fn policy_loss_and_grad(
    groups: &[PolicyGroup],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &ClipConfig,
    temperature: f64,
) -> Result<(f64, Vec<f64>, LossStats)> {
    cfg.validate()?;
    let active = groups.iter().filter(|g| g.contributes()).count();
    let mut grad = vec![0.0; params.len()];
    let mut acc = StatsAcc::default();
    if active == 0 {
        for g in groups {
            acc.excluded += g.samples.len();
        }
        return Ok((0.0, grad, acc.finish(0.0, 0)));
    }
    let scale = 1.0 / active as f64;
    let mut loss = 0.0;
    for g in groups {
        if !g.contributes() {
            acc.excluded += g.samples.len();
            continue;
        }
        let responses: Vec<&[TokenId]> = g.samples.iter().map(|s| s.response.as_slice()).collect();
        let trace = GroupTrace::forward(params, &g.prompt, &responses, temperature, true)?;
        let new_lp = trace.logprobs();
        let ref_lp = if cfg.beta > 0.0 {
            Some(GroupTrace::forward(ref_params, &g.prompt, &responses, temperature, false)?.logprobs())
        } else {
            None
        };
        let (l, adj) = group_loss_terms(g, &new_lp, ref_lp.as_deref(), cfg, scale, &mut acc)?;
        loss += l;
        trace.backward(params, &adj, &mut grad)?;
    }
    Ok((loss, grad, acc.finish(loss, active)))
}

/// A prompt's sampled rollouts with their binary rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub problem_id: u64,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(problem_id: u64, rollouts: Vec<Rollout>, rewards: Vec<f64>, norm: AdvantageNorm) -> Result<Self> {
        if rollouts.len() != rewards.len() {
            return Err(Error::Dimension {
                what: "group rewards",
                expected: rollouts.len(),
                got: rewards.len(),
            });
        }
        let advantages = group_advantages_with(&rewards, norm)?;
        Ok(Group {
            problem_id,
            rollouts,
            rewards,
            advantages,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.rewards.iter().all(|&r| r == self.rewards[0])
    }

    pub fn to_policy_group(&self) -> Result<PolicyGroup> {
        let prompt = self
            .rollouts
            .first()
            .map(|r| r.prompt_tokens.clone())
            .ok_or_else(|| Error::Config("empty group".into()))?;
        if self.rollouts.iter().any(|r| r.prompt_tokens != prompt) {
            return Err(Error::Config(format!("group {} mixes prompts", self.problem_id)));
        }
        Ok(PolicyGroup {
            id: self.problem_id,
            prompt,
            samples: self
                .rollouts
                .iter()
                .zip(&self.advantages)
                .map(|(r, &a)| PolicySample {
                    response: r.response_tokens.clone(),
                    old_logprobs: r.old_logprobs.clone(),
                    advantage: a,
                    mask: None,
                })
                .collect(),
        })
    }
}

/// Negated clipped-surrogate objective over stage-1 groups (every response
/// token weighted), with its gradient.
pub fn grpo_loss_and_grad(
    groups: &[Group],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &ClipConfig,
    temperature: f64,
) -> Result<(f64, Vec<f64>, LossStats)> {
    if groups.is_empty() {
        return Err(Error::Config("loss needs at least one group".into()));
    }
    let pg = groups.iter().map(Group::to_policy_group).collect::<Result<Vec<_>>>()?;
    policy_loss_and_grad(&pg, params, ref_params, cfg, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.5, -0.5, -0.5, 0.5]);
        assert_eq!(group_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a[0] - 5.0 / 6.0).abs() < 1e-15);
        for x in &a[1..] {
            assert!((x + 1.0 / 6.0).abs() < 1e-15);
        }
        assert!(matches!(group_advantages(&[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn std_normalization_is_opt_in() {
        let a = group_advantages_with(&[1.0, 0.0, 0.0, 1.0], AdvantageNorm::GroupStd).unwrap();
        assert_eq!(a, vec![1.0, -1.0, -1.0, 1.0]);
        let z = group_advantages_with(&[0.0, 0.0], AdvantageNorm::GroupStd).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(token_kl_estimate(-1.3, -1.3).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        let two = token_kl_estimate(-2.0, -2.0 + ln2).unwrap();
        assert!((two - 0.306_852_819_440_054_7).abs() < 1e-12);
        let half = token_kl_estimate(-2.0, -2.0 - ln2).unwrap();
        assert!((half - 0.193_147_180_559_945_3).abs() < 1e-12);
        assert!(token_kl_estimate(f64::NAN, -1.0).is_err());
        assert!(token_kl_estimate(-1.0, f64::NEG_INFINITY).is_err());
    }

    #[test]
    fn sequence_kl_sums_log_ratios() {
        assert!((sequence_kl_estimate(&[-1.0, -2.0], &[-1.5, -1.0]).unwrap() - (-0.5)).abs() < 1e-15);
        assert!(sequence_kl_estimate(&[-1.0], &[]).is_err());
    }

    #[test]
    fn clip_examples() {
        let cfg = ClipConfig::default();
        assert!((clipped_term(1.5, 1.0, &cfg) - 1.27).abs() < 1e-15);
        assert_eq!(clipped_term(1.0, -0.7, &cfg), -0.7);
        assert!((clipped_term(0.5, -1.0, &cfg) - (-0.8)).abs() < 1e-15);
    }

    #[test]
    fn token_term_gradient_matches_difference_quotient() {
        let cfg = ClipConfig {
            beta: 0.05,
            ..ClipConfig::default()
        };
        for &(lp_new, lp_old, lp_ref, adv) in &[
            (-1.0, -1.1, -0.7, 0.5),
            (-1.0, -1.5, -2.0, 0.5),
            (-1.0, -0.4, -1.0, -0.5),
            (-2.0, -2.1, -1.9, -1.0),
        ] {
            let h = 1e-6;
            let t = token_term(lp_new, lp_old, Some(lp_ref), adv, &cfg);
            let fd = (token_term(lp_new + h, lp_old, Some(lp_ref), adv, &cfg).value
                - token_term(lp_new - h, lp_old, Some(lp_ref), adv, &cfg).value)
                / (2.0 * h);
            assert!((t.grad - fd).abs() < 1e-7, "{} vs {fd}", t.grad);
        }
    }

    fn sample(n: usize, adv: f64, mask: Option<Vec<bool>>) -> PolicySample {
        PolicySample {
            response: vec![5; n],
            old_logprobs: vec![-1.0; n],
            advantage: adv,
            mask,
        }
    }

    #[test]
    fn ratios_of_one_give_negated_mean_advantage() {
        let groups = vec![PolicyGroup {
            id: 0,
            prompt: vec![1],
            samples: vec![sample(3, 0.5, None), sample(2, -0.5, None), sample(4, 0.25, None)],
        }];
        let lp = vec![vec![vec![-1.0; 3], vec![-1.0; 2], vec![-1.0; 4]]];
        let (loss, _, stats) = surrogate_loss(&groups, &lp, None, &ClipConfig::default()).unwrap();
        assert!((loss - (-(0.5 - 0.5 + 0.25) / 3.0)).abs() < 1e-15);
        assert_eq!(stats.mean_ratio, 1.0);
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(stats.tokens, 9);
    }

    #[test]
    fn masked_loss_hand_example() {
        let mask = vec![false, true, true, false, false];
        let groups = vec![PolicyGroup {
            id: 0,
            prompt: vec![1],
            samples: vec![sample(5, 0.5, Some(mask))],
        }];
        let lp = vec![vec![vec![-1.0; 5]]];
        let (loss, adj, _) = surrogate_loss(&groups, &lp, None, &ClipConfig::default()).unwrap();
        assert!((loss - (-0.5)).abs() < 1e-15);
        assert_eq!(adj[0][0][0], 0.0);
        assert_eq!(adj[0][0][3], 0.0);
        assert!(adj[0][0][1] != 0.0);
    }

    #[test]
    fn empty_masks_are_excluded() {
        let groups = vec![PolicyGroup {
            id: 3,
            prompt: vec![1],
            samples: vec![sample(4, 1.0, Some(vec![false; 4])), sample(2, -1.0, Some(vec![false; 2]))],
        }];
        let lp = vec![vec![vec![-1.0; 4], vec![-1.0; 2]]];
        let (loss, adj, stats) = surrogate_loss(&groups, &lp, None, &ClipConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(adj[0].iter().flatten().all(|&a| a == 0.0));
        assert_eq!(stats.groups, 0);
        assert_eq!(stats.excluded_samples, 2);
    }

    #[test]
    fn non_finite_loss_names_the_group() {
        let groups = vec![PolicyGroup {
            id: 42,
            prompt: vec![1],
            samples: vec![sample(1, 1.0, None)],
        }];
        let lp = vec![vec![vec![f64::NAN]]];
        let err = surrogate_loss(&groups, &lp, None, &ClipConfig::default()).unwrap_err();
        assert!(err.to_string().contains("group 42"), "{err}");
    }

    #[test]
    fn clip_config_validation() {
        assert!(ClipConfig::default().validate().is_ok());
        for bad in [
            ClipConfig { eps_low: 0.0, ..Default::default() },
            ClipConfig { eps_low: 1.0, ..Default::default() },
            ClipConfig { eps_high: 0.0, ..Default::default() },
            ClipConfig { beta: -0.1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
