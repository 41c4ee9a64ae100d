//! Variance-based filtering of prompts.
//!
//! A prompt is kept when the policy's empirical accuracy over its sampled
//! group lies strictly inside `(acc_low, acc_high)`, the region where the
//! Bernoulli variance `acc * (1 - acc)` of the outcome is high. The variance
//! threshold `kappa` is carried along as a recorded setting; the accuracy
//! interval alone decides retention.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub n: usize,
    pub acc_low: f64,
    pub acc_high: f64,
    pub kappa: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n: 12,
            acc_low: 0.33,
            acc_high: 0.66,
            kappa: 0.22,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("vbf.n must be >= 2, got {}", self.n)));
        }
        if !(0.0 <= self.acc_low && self.acc_low < self.acc_high && self.acc_high <= 1.0) {
            return Err(Error::Config(format!(
                "vbf interval must satisfy 0 <= acc_low < acc_high <= 1, got ({}, {})",
                self.acc_low, self.acc_high
            )));
        }
        if !(0.0..=0.25).contains(&self.kappa) {
            return Err(Error::Config(format!("vbf.kappa must be in [0, 0.25], got {}", self.kappa)));
        }
        Ok(())
    }

    /// Strict membership in the retention interval.
    pub fn retains(&self, acc: f64) -> bool {
        self.acc_low < acc && acc < self.acc_high
    }
}

/// Audit record of one filtering decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub problem_id: u64,
    pub acc: f64,
    pub variance: f64,
    pub retained: bool,
    pub correct_count: usize,
}

pub fn empirical_accuracy(correct: &[bool]) -> Result<f64> {
    if correct.is_empty() {
        return Err(Error::Config("accuracy of an empty sample is undefined".into()));
    }
    Ok(correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64)
}

pub fn bernoulli_variance(acc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::Config(format!("accuracy must be in [0, 1], got {acc}")));
    }
    Ok(acc * (1.0 - acc))
}

pub fn decide(problem_id: u64, correct: &[bool], cfg: &FilterConfig) -> Result<FilterDecision> {
    if correct.len() != cfg.n {
        return Err(Error::Dimension {
            what: "correctness vector",
            expected: cfg.n,
            got: correct.len(),
        });
    }
    let acc = empirical_accuracy(correct)?;
    Ok(FilterDecision {
        problem_id,
        acc,
        variance: bernoulli_variance(acc)?,
        retained: cfg.retains(acc),
        correct_count: correct.iter().filter(|&&c| c).count(),
    })
}

/// Applies the filter to every `(problem_id, correctness)` pair. Returns the
/// retained ids (in input order) and one decision per problem.
pub fn filter(
    inputs: &[(u64, Vec<bool>)],
    cfg: &FilterConfig,
) -> Result<(Vec<u64>, Vec<FilterDecision>)> {
    let decisions = inputs
        .iter()
        .map(|(id, c)| decide(*id, c, cfg))
        .collect::<Result<Vec<_>>>()?;
    let kept = decisions.iter().filter(|d| d.retained).map(|d| d.problem_id).collect();
    Ok((kept, decisions))
}

/// Appends decisions to a line-delimited JSON audit file.
pub fn write_decisions(path: &Path, decisions: &[FilterDecision]) -> Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for d in decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_decisions(path: &Path) -> Result<Vec<FilterDecision>> {
    crate::jsonl::read_lines(path)
}
