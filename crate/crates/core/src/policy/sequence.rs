use super::forward::{backward_segment, forward_segment, KvCache, KvGrad, SegmentActs};
use super::model::PolicyParams;
use crate::error::{Error, Result};
use crate::task_env::TokenId;

/// Log-probabilities of the next token after `context`, under the model at
/// temperature 1.
pub fn next_token_logprobs(params: &PolicyParams, context: &[TokenId]) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::Config("context must contain at least one token".into()));
    }
    let window = params.shape().context;
    if context.len() > window {
        return Err(Error::ContextOverflow {
            len: context.len(),
            window,
        });
    }
    let mut cache = KvCache::new(params.shape().n_layers);
    let acts = forward_segment(params, context, &mut cache, Some(1.0), false)?;
    let v = params.shape().vocab;
    let logp = acts.logp().expect("head requested");
    Ok(logp[(context.len() - 1) * v..].to_vec())
}

/// Teacher-forced per-token log-probabilities of `response` after `prompt`
/// at temperature 1.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    sequence_logprob_at(params, prompt, response, 1.0)
}

/// Same as [`sequence_logprob`] with logits divided by `temperature`.
pub fn sequence_logprob_at(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
    temperature: f64,
) -> Result<Vec<f64>> {
    let trace = GroupTrace::forward(params, prompt, &[response], temperature, false)?;
    Ok(trace.logprobs().swap_remove(0))
}

struct Branch {
    acts: SegmentActs,
    cache: KvCache,
    response: Vec<TokenId>,
}

/// Teacher-forced pass over several responses that share one prompt.
///
/// The prompt minus its last token is processed once as a shared prefix.
/// Each response becomes a branch that starts at the prompt's last token, so
/// every branch output predicts exactly one response token.
pub struct GroupTrace {
    prefix: Option<(SegmentActs, KvCache)>,
    prefix_len: usize,
    branches: Vec<Option<Branch>>,
    vocab: usize,
    saved: bool,
}

impl GroupTrace {
    pub fn forward(
        params: &PolicyParams,
        prompt: &[TokenId],
        responses: &[&[TokenId]],
        temperature: f64,
        save: bool,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must contain at least one token".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let shape = params.shape();
        let window = shape.context;
        for r in responses {
            let needed = prompt.len() - 1 + r.len();
            if needed > window || prompt.len() > window {
                return Err(Error::ContextOverflow {
                    len: needed.max(prompt.len()),
                    window,
                });
            }
        }
        let prefix_len = prompt.len() - 1;
        let mut cache = KvCache::new(shape.n_layers);
        let prefix_acts = if prefix_len > 0 {
            Some(forward_segment(params, &prompt[..prefix_len], &mut cache, None, save)?)
        } else {
            None
        };
        let last = prompt[prefix_len];
        let mut branches = Vec::with_capacity(responses.len());
        for r in responses {
            if r.is_empty() {
                branches.push(None);
                continue;
            }
            let mut tokens = Vec::with_capacity(r.len());
            tokens.push(last);
            tokens.extend_from_slice(&r[..r.len() - 1]);
            let mut bcache = cache.clone();
            let acts = forward_segment(params, &tokens, &mut bcache, Some(temperature), save)?;
            branches.push(Some(Branch {
                acts,
                cache: bcache,
                response: r.to_vec(),
            }));
        }
        Ok(GroupTrace {
            prefix: prefix_acts.map(|a| (a, cache)),
            prefix_len,
            branches,
            vocab: shape.vocab,
            saved: save,
        })
    }

    /// Log-probability of each response token, one vector per response.
    pub fn logprobs(&self) -> Vec<Vec<f64>> {
        let v = self.vocab;
        self.branches
            .iter()
            .map(|b| match b {
                None => Vec::new(),
                Some(b) => {
                    let lp = b.acts.logp().expect("branches always carry a head");
                    b.response
                        .iter()
                        .enumerate()
                        .map(|(i, &t)| lp[i * v + t as usize])
                        .collect()
                }
            })
            .collect()
    }

    /// Accumulates into `grad` the gradient of an objective whose derivative
    /// with respect to each response token's log-probability is given in
    /// `adjoints` (same shape as [`GroupTrace::logprobs`]).
    pub fn backward(&self, params: &PolicyParams, adjoints: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
        if !self.saved {
            return Err(Error::Config("trace was recorded without activations".into()));
        }
        if adjoints.len() != self.branches.len() {
            return Err(Error::Dimension {
                what: "adjoint groups",
                expected: self.branches.len(),
                got: adjoints.len(),
            });
        }
        let shape = params.shape();
        let (d, v, layers) = (shape.d_model, self.vocab, shape.n_layers);
        let mut prefix_grad = KvGrad::zeros(layers, self.prefix_len, d);
        let mut touched = false;
        for (b, adj) in self.branches.iter().zip(adjoints) {
            let Some(b) = b else {
                if !adj.is_empty() {
                    return Err(Error::Dimension {
                        what: "adjoints",
                        expected: 0,
                        got: adj.len(),
                    });
                }
                continue;
            };
            if adj.len() != b.response.len() {
                return Err(Error::Dimension {
                    what: "adjoints",
                    expected: b.response.len(),
                    got: adj.len(),
                });
            }
            if adj.iter().all(|&a| a == 0.0) {
                continue;
            }
            if let Some(i) = adj.iter().position(|a| !a.is_finite()) {
                return Err(Error::Numerical(format!("non-finite adjoint at response token {i}")));
            }
            let mut dlogp = vec![0.0; b.response.len() * v];
            for (i, (&t, &a)) in b.response.iter().zip(adj).enumerate() {
                dlogp[i * v + t as usize] = a;
            }
            let mut kv = KvGrad::zeros(layers, b.cache.len(), d);
            backward_segment(params, &b.acts, &b.cache, Some(&dlogp), &mut kv, grad)?;
            prefix_grad.accumulate_prefix(&kv, self.prefix_len, d);
            touched = true;
        }
        if touched {
            if let Some((acts, cache)) = &self.prefix {
                backward_segment(params, acts, cache, None, &mut prefix_grad, grad)?;
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
        }
        Ok(())
    }
}

/// One prompt with the responses to score under it.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub prompt: Vec<TokenId>,
    pub responses: Vec<Vec<TokenId>>,
}

/// Value and gradient of an arbitrary differentiable function of
/// teacher-forced token log-probabilities.
///
/// `objective` receives the log-probabilities indexed `[batch][response][token]`
/// and returns the objective value together with its partial derivatives in
/// the same layout.
pub fn objective_gradient<F>(
    params: &PolicyParams,
    batches: &[TeacherBatch],
    temperature: f64,
    objective: F,
) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&[Vec<Vec<f64>>]) -> (f64, Vec<Vec<Vec<f64>>>),
{
    let traces = batches
        .iter()
        .map(|b| {
            let refs: Vec<&[TokenId]> = b.responses.iter().map(Vec::as_slice).collect();
            GroupTrace::forward(params, &b.prompt, &refs, temperature, true)
        })
        .collect::<Result<Vec<_>>>()?;
    let logprobs: Vec<Vec<Vec<f64>>> = traces.iter().map(GroupTrace::logprobs).collect();
    let (value, adjoints) = objective(&logprobs);
    if !value.is_finite() {
        return Err(Error::Numerical("objective value is not finite".into()));
    }
    if adjoints.len() != traces.len() {
        return Err(Error::Dimension {
            what: "adjoint batches",
            expected: traces.len(),
            got: adjoints.len(),
        });
    }
    let mut grad = vec![0.0; params.len()];
    for (t, adj) in traces.iter().zip(&adjoints) {
        t.backward(params, adj, &mut grad)?;
    }
    Ok((value, grad))
}
