//! Held-out evaluation: greedy accuracy and avg@k over sampled attempts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::greedy_decode;
use crate::seed;
use crate::self_correction::{PolicyResponder, Responder};
use crate::task_env::{verify, Problem, TokenId, Vocabulary};

/// A responder that can also answer deterministically.
pub trait Solver: Responder {
    fn greedy(&mut self, prompt: &[TokenId]) -> Result<Vec<TokenId>>;
}

impl Solver for PolicyResponder<'_> {
    fn greedy(&mut self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(greedy_decode(self.params, prompt, self.sampler.max_new_tokens)?.response_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    /// Mean correctness of the `k` sampled attempts, per problem.
    pub per_problem: Vec<f64>,
    pub avg_at_k: f64,
    pub greedy_correct: Vec<bool>,
    pub greedy_accuracy: f64,
}

fn correct(problem: &Problem, response: &[TokenId]) -> bool {
    verify(problem, &Vocabulary::standard().decode(response)).correct
}

pub fn greedy_accuracy<S: Solver>(solver: &mut S, problems: &[Problem]) -> Result<(Vec<bool>, f64)> {
    if problems.is_empty() {
        return Err(Error::Config("evaluation needs at least one problem".into()));
    }
    let flags = problems
        .iter()
        .map(|p| Ok(correct(p, &solver.greedy(&p.policy_prompt())?)))
        .collect::<Result<Vec<bool>>>()?;
    let acc = flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64;
    Ok((flags, acc))
}

/// Samples `k` attempts per problem and reports per-problem and mean
/// accuracy together with greedy accuracy.
pub fn evaluate_avg_at_k<S: Solver>(solver: &mut S, problems: &[Problem], k: usize, seed: u64) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("avg@k needs k >= 1".into()));
    }
    let (greedy_correct, greedy_accuracy) = greedy_accuracy(solver, problems)?;
    let per_problem = problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let attempts = solver.respond(&p.policy_prompt(), k, seed::derive(seed, p.id, i as u64))?;
            let hits = attempts.iter().filter(|r| correct(p, &r.response_tokens)).count();
            Ok(hits as f64 / k as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let avg_at_k = per_problem.iter().sum::<f64>() / per_problem.len() as f64;
    Ok(EvalReport {
        k,
        per_problem,
        avg_at_k,
        greedy_correct,
        greedy_accuracy,
    })
}

/// Convenience wrapper evaluating policy parameters directly.
pub fn evaluate_policy(
    params: &crate::policy::PolicyParams,
    problems: &[Problem],
    k: usize,
    sampler: crate::policy::SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut solver = PolicyResponder { params, sampler };
    evaluate_avg_at_k(&mut solver, problems, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Rollout;
    use crate::task_env::{generate_problems_with, OpMix, EOS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rollout(prompt: &[TokenId], text: &str) -> Rollout {
        let mut response = Vocabulary::standard().encode(text).unwrap();
        response.push(EOS);
        Rollout {
            prompt_tokens: prompt.to_vec(),
            old_logprobs: vec![0.0; response.len()],
            response_tokens: response,
            truncated: false,
        }
    }

    fn answer_of(prompt: &[TokenId]) -> String {
        let text = Vocabulary::standard().decode(prompt);
        crate::task_env::evaluate_prompt(&text).unwrap().to_string()
    }

    /// Always right.
    struct Oracle;
    impl Responder for Oracle {
        fn respond(&mut self, prompt: &[TokenId], g: usize, _: u64) -> Result<Vec<crate::policy::Rollout>> {
            Ok((0..g).map(|_| rollout(prompt, &format!("Answer: {}", answer_of(prompt)))).collect())
        }
    }
    impl Solver for Oracle {
        fn greedy(&mut self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
            Ok(self.respond(prompt, 1, 0)?.remove(0).response_tokens)
        }
    }

    /// Always the same wrong number.
    struct Stuck;
    impl Responder for Stuck {
        fn respond(&mut self, prompt: &[TokenId], g: usize, _: u64) -> Result<Vec<crate::policy::Rollout>> {
            Ok((0..g).map(|_| rollout(prompt, "Answer: -1")).collect())
        }
    }
    impl Solver for Stuck {
        fn greedy(&mut self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
            Ok(self.respond(prompt, 1, 0)?.remove(0).response_tokens)
        }
    }

    /// Guesses a digit uniformly at random.
    struct Guesser(ChaCha8Rng);
    impl Responder for Guesser {
        fn respond(&mut self, prompt: &[TokenId], g: usize, _: u64) -> Result<Vec<crate::policy::Rollout>> {
            Ok((0..g)
                .map(|_| rollout(prompt, &format!("Answer: {}", self.0.random_range(0..10))))
                .collect())
        }
    }
    impl Solver for Guesser {
        fn greedy(&mut self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
            Ok(self.respond(prompt, 1, 0)?.remove(0).response_tokens)
        }
    }

    #[test]
    fn oracle_scores_one() {
        let problems = generate_problems_with(1, 20, 2, OpMix::Both).unwrap();
        let r = evaluate_avg_at_k(&mut Oracle, &problems, 1, 0).unwrap();
        assert_eq!(r.avg_at_k, 1.0);
        assert_eq!(r.greedy_accuracy, 1.0);
    }

    #[test]
    fn fixed_wrong_answer_scores_zero() {
        let problems = generate_problems_with(1, 20, 2, OpMix::Add).unwrap();
        for k in [1, 4, 16] {
            let r = evaluate_avg_at_k(&mut Stuck, &problems, k, 0).unwrap();
            assert_eq!(r.avg_at_k, 0.0);
            assert_eq!(r.per_problem.len(), 20);
        }
    }

    #[test]
    fn random_digit_guessing_scores_a_tenth() {
        // single-digit answers: a+b with a+b < 10
        let problems: Vec<Problem> = (0..100u64)
            .map(|i| {
                let a = i % 5;
                let b = (i / 5) % 5;
                Problem::new(i, format!("{a}+{b}=?"), (a + b).to_string(), 1).unwrap()
            })
            .collect();
        let r = evaluate_avg_at_k(&mut Guesser(ChaCha8Rng::seed_from_u64(3)), &problems, 16, 0).unwrap();
        assert!((r.avg_at_k - 0.1).abs() < 0.03, "{}", r.avg_at_k);
    }

    #[test]
    fn zero_k_is_rejected() {
        let problems = generate_problems_with(1, 2, 1, OpMix::Add).unwrap();
        assert!(evaluate_avg_at_k(&mut Oracle, &problems, 0, 0).is_err());
    }
}
