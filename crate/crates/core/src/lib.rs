//! Self-correcting relative policy optimization at desk scale.
pub mod error;
pub mod error_pool;
pub mod gradcheck;
pub mod grpo;
pub(crate) mod jsonl;
pub mod optim;
pub mod policy;
pub mod report;
pub mod seed;
pub mod self_correction;
pub mod task_env;
pub mod trainer;
pub mod vbf;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/self_correction.md")]
    mod self_correction {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
