//! The self-correction stage: reflection prompts built from pooled mistakes,
//! correction attempts, the Analysis-span mask and the masked loss.
//!
//! A correction attempt is rewarded on its final answer, but only the tokens
//! strictly between the first `**Analysis:**` marker and the first
//! `**Corrected Solution:**` marker after it carry gradient.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_pool::{ErrorPool, ErrorRecord};
use crate::grpo::{group_advantages, policy_loss_and_grad, ClipConfig, LossStats, PolicyGroup, PolicySample};
use crate::policy::{sample_group, PolicyParams, Rollout, SamplerConfig};
use crate::seed;
use crate::task_env::{
    find_subsequence, verify_against, TokenId, Vocabulary, ANALYSIS_MARKER, BOS, CORRECTED_MARKER,
    ZERO_WIDTH_SEPARATOR,
};

/// Reflection prompt. `{question}` and `{wrong_answer}` are the two slots.
pub const REFLECTION_TEMPLATE: &str = "You tried performing the task, but failed to generate the correct answer. Reflect on what went wrong and do better next time.\n\nQuestion: {question}\n\nWrong solution: {wrong_answer}\n\nYour response should follow this format:\n\n**Analysis:** [Analyze why the solution is wrong]\n\n**Corrected Solution:** [Provide the correct solution]\n\nResponse:";

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionPrompt {
    pub problem_id: u64,
    pub full_text: String,
    /// `BOS` followed by the encoded text.
    pub tokens: Vec<TokenId>,
    /// Set when a slot contained a marker that had to be neutralized.
    pub sanitized: bool,
}

/// Breaks every marker occurrence in `text` by inserting a zero-width
/// separator after its first character. Returns whether anything changed.
pub fn neutralize_markers(text: &str) -> (String, bool) {
    let mut out = text.to_string();
    let mut changed = false;
    loop {
        let hit = [ANALYSIS_MARKER, CORRECTED_MARKER]
            .iter()
            .filter_map(|m| out.find(m))
            .min();
        let Some(at) = hit else { break };
        out.insert(at + 1, ZERO_WIDTH_SEPARATOR);
        changed = true;
    }
    (out, changed)
}

pub fn compose_prompt(record: &ErrorRecord) -> Result<ReflectionPrompt> {
    let (question, q_changed) = neutralize_markers(&record.prompt_text);
    let (wrong, w_changed) = neutralize_markers(&record.wrong_answer_text);
    let sanitized = q_changed || w_changed;
    if sanitized {
        warn!("neutralized marker text in error record for problem {}", record.problem_id);
    }
    let full_text = REFLECTION_TEMPLATE
        .replacen("{question}", &question, 1)
        .replacen("{wrong_answer}", &wrong, 1);
    let mut tokens = vec![BOS];
    tokens.extend(Vocabulary::standard().encode(&full_text)?);
    Ok(ReflectionPrompt {
        problem_id: record.problem_id,
        full_text,
        tokens,
        sanitized,
    })
}

/// Marks the tokens strictly between the first Analysis marker and the first
/// Corrected marker that follows it. All zeros when either is missing.
pub fn find_reflection_mask(response: &[TokenId]) -> (Vec<bool>, usize) {
    let vocab = Vocabulary::standard();
    let mut mask = vec![false; response.len()];
    let a = vocab.analysis_mark();
    let Some(start) = find_subsequence(response, a, 0).map(|i| i + a.len()) else {
        return (mask, 0);
    };
    let Some(end) = find_subsequence(response, vocab.corrected_mark(), start) else {
        return (mask, 0);
    };
    mask[start..end].iter_mut().for_each(|m| *m = true);
    (mask, end - start)
}

/// Stage-2 reward: the answer after the Corrected marker when both markers
/// appear in order, otherwise the answer in the whole response.
pub fn correction_reward(ground_truth: &str, response_text: &str) -> f64 {
    let graded = response_text
        .find(ANALYSIS_MARKER)
        .and_then(|a| {
            let from = a + ANALYSIS_MARKER.len();
            response_text[from..]
                .find(CORRECTED_MARKER)
                .map(|c| &response_text[from + c + CORRECTED_MARKER.len()..])
        })
        .unwrap_or(response_text);
    verify_against(ground_truth, graded).reward()
}

/// Which response tokens the stage-2 loss sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Only the Analysis span.
    #[default]
    Reflection,
    /// Every response token.
    FullResponse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionSample {
    pub response_tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub mask: Vec<bool>,
    pub mask_size: usize,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionGroup {
    pub record: ErrorRecord,
    pub prompt: ReflectionPrompt,
    pub samples: Vec<ReflectionSample>,
}

impl ReflectionGroup {
    /// Scores `rollouts` as correction attempts at `record`.
    pub fn score(record: ErrorRecord, prompt: ReflectionPrompt, rollouts: Vec<Rollout>, mode: MaskMode) -> Result<Self> {
        let vocab = Vocabulary::standard();
        let rewards: Vec<f64> = rollouts
            .iter()
            .map(|r| correction_reward(&record.ground_truth, &vocab.decode(&r.response_tokens)))
            .collect();
        let advantages = group_advantages(&rewards)?;
        let samples = rollouts
            .into_iter()
            .zip(rewards.into_iter().zip(advantages))
            .map(|(r, (reward, advantage))| {
                let (mask, mask_size) = match mode {
                    MaskMode::Reflection => find_reflection_mask(&r.response_tokens),
                    MaskMode::FullResponse => (vec![true; r.response_tokens.len()], r.response_tokens.len()),
                };
                ReflectionSample {
                    response_tokens: r.response_tokens,
                    old_logprobs: r.old_logprobs,
                    mask,
                    mask_size,
                    reward,
                    advantage,
                }
            })
            .collect();
        Ok(ReflectionGroup { record, prompt, samples })
    }

    pub fn to_policy_group(&self) -> PolicyGroup {
        PolicyGroup {
            id: self.record.problem_id,
            prompt: self.prompt.tokens.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| PolicySample {
                    response: s.response_tokens.clone(),
                    old_logprobs: s.old_logprobs.clone(),
                    advantage: s.advantage,
                    mask: Some(s.mask.clone()),
                })
                .collect(),
        }
    }
}

/// Source of correction attempts; the policy in training, a script in tests.
pub trait Responder {
    fn respond(&mut self, prompt: &[TokenId], g: usize, seed: u64) -> Result<Vec<Rollout>>;
}

pub struct PolicyResponder<'a> {
    pub params: &'a PolicyParams,
    pub sampler: SamplerConfig,
}

impl Responder for PolicyResponder<'_> {
    fn respond(&mut self, prompt: &[TokenId], g: usize, seed: u64) -> Result<Vec<Rollout>> {
        sample_group(self.params, prompt, g, &self.sampler, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Error records replayed per round.
    pub records: usize,
    /// Attempts sampled per record.
    pub group_size: usize,
    pub mask: MaskMode,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            records: 8,
            group_size: 12,
            mask: MaskMode::Reflection,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.records == 0 {
            return Err(Error::Config("stage2.records must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("stage2.group_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Summary of one self-correction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub records_sampled: usize,
    /// Records whose reflection prompt did not fit the context window.
    pub records_skipped: usize,
    pub correction_rate: f64,
    pub mean_mask_size: f64,
    pub dropped_samples: usize,
    pub loss: f64,
}

impl RoundReport {
    pub fn from_groups(round: u64, groups: &[ReflectionGroup], skipped: usize, loss: f64) -> Self {
        let samples: Vec<&ReflectionSample> = groups.iter().flat_map(|g| &g.samples).collect();
        let n = samples.len().max(1) as f64;
        RoundReport {
            round,
            records_sampled: groups.len() + skipped,
            records_skipped: skipped,
            correction_rate: samples.iter().map(|s| s.reward).sum::<f64>() / n,
            mean_mask_size: samples.iter().map(|s| s.mask_size as f64).sum::<f64>() / n,
            dropped_samples: samples.iter().filter(|s| s.mask_size == 0).count(),
            loss,
        }
    }
}

/// Samples records from the pool and scores `group_size` correction attempts
/// for each. Fails with [`Error::EmptyPool`] when there is nothing to replay.
/// Also returns the number of records skipped for exceeding `window`.
pub fn run_correction_round<R: Responder>(
    pool: &mut ErrorPool,
    responder: &mut R,
    cfg: &CorrectionConfig,
    window: usize,
    seed: u64,
) -> Result<(Vec<ReflectionGroup>, usize)> {
    cfg.validate()?;
    let records = pool.sample_batch(cfg.records, seed::derive(seed, 0, 0))?;
    let mut groups = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (i, record) in records.into_iter().enumerate() {
        let prompt = compose_prompt(&record)?;
        if prompt.tokens.len() >= window {
            warn!(
                "reflection prompt for problem {} needs {} tokens, window is {window}",
                record.problem_id,
                prompt.tokens.len()
            );
            skipped += 1;
            continue;
        }
        let rollouts = responder.respond(&prompt.tokens, cfg.group_size, seed::derive(seed, 1, i as u64))?;
        groups.push(ReflectionGroup::score(record, prompt, rollouts, cfg.mask)?);
    }
    Ok((groups, skipped))
}

/// Negated masked objective over the reflection groups, with its gradient.
/// Samples with an empty mask are excluded; when all are, the loss and the
/// gradient are zero.
pub fn scrpo_masked_loss_and_grad(
    groups: &[ReflectionGroup],
    params: &PolicyParams,
    ref_params: &PolicyParams,
    cfg: &ClipConfig,
    temperature: f64,
) -> Result<(f64, Vec<f64>, LossStats)> {
    let pg: Vec<PolicyGroup> = groups.iter().map(ReflectionGroup::to_policy_group).collect();
    policy_loss_and_grad(&pg, params, ref_params, cfg, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_pool::{Admission, PoolConfig};
    use crate::grpo::surrogate_loss;
    use proptest::prelude::*;

    fn enc(s: &str) -> Vec<TokenId> {
        Vocabulary::standard().encode(s).unwrap()
    }

    fn record(question: &str, wrong: &str) -> ErrorRecord {
        ErrorRecord {
            problem_id: 3,
            prompt_text: question.into(),
            ground_truth: "3".into(),
            wrong_answer_text: wrong.into(),
            capture_iteration: 0,
            acc_at_capture: 0.5,
            consumed_count: 0,
        }
    }

    fn count(hay: &str, needle: &str) -> usize {
        hay.matches(needle).count()
    }

    #[test]
    fn template_substitution() {
        let p = compose_prompt(&record("1+2=?", "Answer: 4")).unwrap();
        assert!(p.full_text.contains("Question: 1+2=?"));
        assert!(p.full_text.contains("Wrong solution: Answer: 4"));
        assert!(p.full_text.ends_with("Response:"));
        assert!(!p.sanitized);
        assert_eq!(p, compose_prompt(&record("1+2=?", "Answer: 4")).unwrap());
        assert_eq!(p.tokens[0], BOS);
        assert_eq!(Vocabulary::standard().decode(&p.tokens), p.full_text);
    }

    #[test]
    fn planted_markers_are_neutralized() {
        let wrong = "**Analysis:** fine **Corrected Solution:** Answer: 4";
        let p = compose_prompt(&record("1+2=?", wrong)).unwrap();
        assert!(p.sanitized);
        assert_eq!(count(&p.full_text, ANALYSIS_MARKER), 1);
        assert_eq!(count(&p.full_text, CORRECTED_MARKER), 1);
        let (_, changed) = neutralize_markers("***Analysis:**Analysis:**");
        assert!(changed);
    }

    proptest! {
        #[test]
        fn neutralized_text_has_no_markers(s in "[*A-Za-z: ]{0,40}") {
            let planted = format!("{s}{ANALYSIS_MARKER}{s}{CORRECTED_MARKER}{s}");
            let (out, _) = neutralize_markers(&planted);
            prop_assert!(!out.contains(ANALYSIS_MARKER));
            prop_assert!(!out.contains(CORRECTED_MARKER));
            prop_assert_eq!(out.replace(ZERO_WIDTH_SEPARATOR, ""), planted);
        }
    }

    #[test]
    fn mask_examples() {
        let (mask, size) = find_reflection_mask(&enc("x**Analysis:**abc**Corrected Solution:**y"));
        assert_eq!(size, 3);
        let ones: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![14, 15, 16]);
        assert_eq!(find_reflection_mask(&enc("Answer: 3")).1, 0);
        assert_eq!(find_reflection_mask(&enc("**Analysis:****Corrected Solution:**")).1, 0);
        assert_eq!(find_reflection_mask(&enc("**Corrected Solution:**a**Analysis:**")).1, 0);
        // first pair wins
        let (_, size) =
            find_reflection_mask(&enc("**Analysis:**ab**Corrected Solution:**c**Analysis:**defg**Corrected Solution:**"));
        assert_eq!(size, 2);
    }

    #[test]
    fn stage_two_reward() {
        assert_eq!(correction_reward("3", "**Analysis:** no\n**Corrected Solution:** Answer: 3"), 1.0);
        // grading is restricted to the corrected span
        assert_eq!(correction_reward("3", "**Analysis:** Answer: 3 **Corrected Solution:** 4"), 0.0);
        assert_eq!(correction_reward("3", "Answer: 3"), 1.0);
        assert_eq!(correction_reward("3", "Answer: 5"), 0.0);
    }

    struct Scripted(Vec<&'static str>);

    impl Responder for Scripted {
        fn respond(&mut self, prompt: &[TokenId], g: usize, _seed: u64) -> Result<Vec<Rollout>> {
            Ok((0..g)
                .map(|i| {
                    let response = enc(self.0[i % self.0.len()]);
                    Rollout {
                        prompt_tokens: prompt.to_vec(),
                        old_logprobs: vec![-1.0; response.len()],
                        response_tokens: response,
                        truncated: false,
                    }
                })
                .collect())
        }
    }

    fn pool_with(n: u64) -> ErrorPool {
        let mut p = ErrorPool::new(PoolConfig::default(), Admission::NON_DEGENERATE).unwrap();
        for i in 0..n {
            let mut r = record("1+2=?", "Answer: 4");
            r.problem_id = i;
            p.insert(r).unwrap();
        }
        p
    }

    #[test]
    fn one_correct_of_four() {
        let mut pool = pool_with(1);
        let mut script = Scripted(vec![
            "**Analysis:** 1+2 is not 4\n**Corrected Solution:** Answer: 3",
            "**Analysis:** hm\n**Corrected Solution:** Answer: 5",
            "Answer: 6",
            "Answer: 7",
        ]);
        let cfg = CorrectionConfig {
            records: 1,
            group_size: 4,
            mask: MaskMode::Reflection,
        };
        let (groups, skipped) = run_correction_round(&mut pool, &mut script, &cfg, 1024, 9).unwrap();
        assert_eq!(skipped, 0);
        let adv: Vec<f64> = groups[0].samples.iter().map(|s| s.advantage).collect();
        assert_eq!(adv, vec![0.75, -0.25, -0.25, -0.25]);
        let report = RoundReport::from_groups(5, &groups, 0, 0.0);
        assert_eq!(report.correction_rate, 0.25);
        assert_eq!(report.dropped_samples, 2);
        assert_eq!(pool.records().next().unwrap().consumed_count, 1);
    }

    #[test]
    fn correct_without_markers_is_dropped() {
        let mut pool = pool_with(1);
        let mut script = Scripted(vec!["Answer: 3", "Answer: 8"]);
        let cfg = CorrectionConfig {
            records: 1,
            group_size: 2,
            mask: MaskMode::Reflection,
        };
        let (groups, _) = run_correction_round(&mut pool, &mut script, &cfg, 1024, 0).unwrap();
        assert_eq!(groups[0].samples[0].reward, 1.0);
        assert_eq!(groups[0].samples[0].mask_size, 0);
        assert!(!groups[0].to_policy_group().contributes());
    }

    #[test]
    fn full_response_mode_masks_everything() {
        let mut pool = pool_with(2);
        let mut script = Scripted(vec!["Answer: 3", "no"]);
        let cfg = CorrectionConfig {
            records: 2,
            group_size: 2,
            mask: MaskMode::FullResponse,
        };
        let (groups, _) = run_correction_round(&mut pool, &mut script, &cfg, 1024, 0).unwrap();
        let report = RoundReport::from_groups(0, &groups, 0, 0.0);
        assert_eq!(report.mean_mask_size, (9.0 + 2.0) / 2.0);
    }

    #[test]
    fn empty_pool_and_oversized_prompts() {
        let mut empty = ErrorPool::new(PoolConfig::default(), Admission::NON_DEGENERATE).unwrap();
        let cfg = CorrectionConfig::default();
        let mut script = Scripted(vec!["x"]);
        assert!(matches!(
            run_correction_round(&mut empty, &mut script, &cfg, 1024, 0),
            Err(Error::EmptyPool)
        ));
        let mut pool = pool_with(3);
        let (groups, skipped) = run_correction_round(&mut pool, &mut script, &cfg, 64, 0).unwrap();
        assert!(groups.is_empty());
        assert_eq!(skipped, 3);
    }

    #[test]
    fn masked_loss_hand_example() {
        // one trajectory of 5 tokens, mask on 2, ratios 1, advantage 0.5
        let group = PolicyGroup {
            id: 0,
            prompt: vec![BOS],
            samples: vec![PolicySample {
                response: vec![5; 5],
                old_logprobs: vec![-1.0; 5],
                advantage: 0.5,
                mask: Some(vec![false, true, true, false, false]),
            }],
        };
        let (loss, adj, _) =
            surrogate_loss(&[group], &[vec![vec![-1.0; 5]]], None, &ClipConfig::default()).unwrap();
        assert!((loss + 0.5).abs() < 1e-15);
        assert_eq!(adj[0][0][0], 0.0);
        assert_eq!(adj[0][0][3], 0.0);
    }

    #[test]
    fn padding_the_span_keeps_the_loss() {
        let cfg = ClipConfig {
            beta: 0.01,
            ..ClipConfig::default()
        };
        let make = |z: usize| {
            let n = 3 + z;
            let group = PolicyGroup {
                id: 0,
                prompt: vec![BOS],
                samples: vec![PolicySample {
                    response: vec![5; n + 2],
                    old_logprobs: vec![-1.2; n + 2],
                    advantage: 0.7,
                    mask: Some((0..n + 2).map(|i| i >= 1 && i <= n).collect()),
                }],
            };
            let lp = vec![vec![-1.0; n + 2]];
            let rf = vec![vec![-0.9; n + 2]];
            surrogate_loss(&[group], &[lp], Some(&[rf]), &cfg).unwrap().0
        };
        let base = make(0);
        for z in 1..6 {
            assert!((make(z) - base).abs() < 1e-15);
        }
    }
}
