//! The policy: a small decoder-only transformer over the character
//! vocabulary, written with explicit forward and backward passes in `f64`,
//! plus temperature / nucleus sampling and binary checkpoints.

mod checkpoint;
mod forward;
mod model;
mod sampler;
mod sequence;

pub use checkpoint::{load_policy, save_policy, POLICY_MAGIC, POLICY_VERSION};
pub(crate) use checkpoint::{read_f64s, read_u32, read_u64, write_f64s};
pub use forward::{backward_segment, forward_segment, KvCache, KvGrad, SegmentActs};
pub use model::{ModelShape, PolicyParams};
pub use sampler::{draw, greedy_decode, nucleus, sample_group, Rollout, SamplerConfig};
pub use sequence::{
    next_token_logprobs, objective_gradient, sequence_logprob, sequence_logprob_at, GroupTrace,
    TeacherBatch,
};
