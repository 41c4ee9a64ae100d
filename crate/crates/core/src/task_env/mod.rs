//! Synthetic verifiable arithmetic tasks: vocabulary, problem generation and
//! the exact-match verifier that produces the binary reward.

mod problem;
mod verify;
mod vocab;

pub use problem::{
    evaluate_prompt, generate_problems, generate_problems_with, read_problems, write_problems,
    OpMix, Problem, ANSWER_REQUEST, MAX_DIFFICULTY,
};
pub use verify::{canonicalize, verify, verify_against, Verdict, ANSWER_MARKER};
pub use vocab::{
    find_subsequence, TokenId, Vocabulary, ANALYSIS_MARKER, BOS, CORRECTED_MARKER, EOS, PAD,
    ZERO_WIDTH_SEPARATOR,
};
