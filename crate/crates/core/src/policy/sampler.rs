//! Temperature and nucleus (top-p) sampling of responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_segment, KvCache};
use super::model::PolicyParams;
use crate::error::{Error, Result};
use crate::task_env::{TokenId, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.6,
            top_p: 0.95,
            max_new_tokens: 256,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "sampler.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!(
                "sampler.top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("sampler.max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled response together with the sampling-time log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    /// Log-probability of each response token under the temperature-scaled,
    /// untruncated policy distribution.
    pub old_logprobs: Vec<f64>,
    /// True when generation stopped without emitting end-of-sequence.
    pub truncated: bool,
}

/// The renormalized nucleus of `softmax(logits / temperature)`: the smallest
/// set of most-probable tokens whose mass reaches `top_p`.
///
/// Entries are `(token, probability)` in decreasing probability order, ties
/// broken by token id.
pub fn nucleus(logits: &[f64], temperature: f64, top_p: f64) -> Vec<(usize, f64)> {
    let mut scaled: Vec<f64> = logits.to_vec();
    super::forward::log_softmax_scaled(&mut scaled, temperature);
    nucleus_from_logprobs(&scaled, top_p)
}

pub(crate) fn nucleus_from_logprobs(logp: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = logp.iter().map(|&l| l.exp()).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, &(_, p)) in order.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    let mass: f64 = order.iter().map(|e| e.1).sum();
    for e in order.iter_mut() {
        e.1 /= mass;
    }
    order
}

/// Draws one token from a nucleus distribution.
pub fn draw<R: Rng + ?Sized>(dist: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(tok, p) in dist {
        cum += p;
        if u < cum {
            return tok;
        }
    }
    dist.last().expect("nucleus is never empty").0
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

enum Decode<'a, R: Rng> {
    Sample(&'a SamplerConfig, &'a mut R),
    Greedy(usize),
}

fn prefix_cache(params: &PolicyParams, prompt: &[TokenId]) -> Result<KvCache> {
    if prompt.is_empty() {
        return Err(Error::Config("prompt must contain at least one token".into()));
    }
    let window = params.shape().context;
    if prompt.len() > window {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            window,
        });
    }
    let mut cache = KvCache::new(params.shape().n_layers);
    if prompt.len() > 1 {
        forward_segment(params, &prompt[..prompt.len() - 1], &mut cache, None, false)?;
    }
    Ok(cache)
}

fn decode_one<R: Rng>(
    params: &PolicyParams,
    prompt: &[TokenId],
    mut cache: KvCache,
    mut mode: Decode<'_, R>,
) -> Result<Rollout> {
    let v = params.shape().vocab;
    let window = params.shape().context;
    let (temperature, max_new) = match &mode {
        Decode::Sample(cfg, _) => (cfg.temperature, cfg.max_new_tokens),
        Decode::Greedy(max_new) => (1.0, *max_new),
    };
    let mut response = Vec::new();
    let mut logprobs = Vec::new();
    let mut feed = *prompt.last().expect("non-empty prompt");
    let mut truncated = true;
    while response.len() < max_new && prompt.len() + response.len() <= window {
        let acts = forward_segment(params, &[feed], &mut cache, Some(temperature), false)?;
        let row = &acts.logp().expect("head requested")[..v];
        let tok = match &mut mode {
            Decode::Sample(cfg, rng) => draw(&nucleus_from_logprobs(row, cfg.top_p), *rng),
            Decode::Greedy(_) => argmax(row),
        };
        response.push(tok as TokenId);
        logprobs.push(row[tok]);
        if tok as TokenId == EOS {
            truncated = false;
            break;
        }
        feed = tok as TokenId;
    }
    Ok(Rollout {
        prompt_tokens: prompt.to_vec(),
        response_tokens: response,
        old_logprobs: logprobs,
        truncated,
    })
}

/// Samples `g` responses to `prompt`. Deterministic for a fixed seed.
pub fn sample_group(
    params: &PolicyParams,
    prompt: &[TokenId],
    g: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Rollout>> {
    cfg.validate()?;
    let cache = prefix_cache(params, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..g)
        .map(|_| decode_one(params, prompt, cache.clone(), Decode::Sample(cfg, &mut rng)))
        .collect()
}

/// Argmax decoding at temperature 1. `old_logprobs` holds the model's
/// log-probabilities of the chosen tokens.
pub fn greedy_decode(params: &PolicyParams, prompt: &[TokenId], max_new_tokens: usize) -> Result<Rollout> {
    let cache = prefix_cache(params, prompt)?;
    decode_one::<ChaCha8Rng>(params, prompt, cache, Decode::Greedy(max_new_tokens))
}
