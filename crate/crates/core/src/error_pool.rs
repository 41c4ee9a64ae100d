//! Store of (question, verified-wrong answer) pairs harvested during stage 1
//! and replayed by the self-correction stage.
//!
//! The pool is bounded; once full, the oldest record is evicted. Records are
//! deduplicated on `(problem_id, wrong_answer_text)` and are kept after being
//! sampled, with `consumed_count` tracking how often each was replayed.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::task_env::verify_against;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub problem_id: u64,
    pub prompt_text: String,
    pub ground_truth: String,
    pub wrong_answer_text: String,
    pub capture_iteration: u64,
    pub acc_at_capture: f64,
    pub consumed_count: u64,
}

impl ErrorRecord {
    fn key(&self) -> (u64, String) {
        (self.problem_id, self.wrong_answer_text.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub capacity: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { capacity: 4096 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("pool.capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Open accuracy interval a record's capture accuracy must fall in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admission {
    pub low: f64,
    pub high: f64,
}

impl Admission {
    /// Any group that was neither all-correct nor all-wrong.
    pub const NON_DEGENERATE: Admission = Admission { low: 0.0, high: 1.0 };

    fn admits(&self, acc: f64) -> bool {
        self.low < acc && acc < self.high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insert {
    Accepted,
    /// Accepted after evicting the oldest record.
    AcceptedWithEviction,
    Duplicate,
}

#[derive(Debug, Clone)]
pub struct ErrorPool {
    cfg: PoolConfig,
    admission: Admission,
    records: VecDeque<ErrorRecord>,
    keys: HashSet<(u64, String)>,
}

impl ErrorPool {
    pub fn new(cfg: PoolConfig, admission: Admission) -> Result<Self> {
        cfg.validate()?;
        Ok(ErrorPool {
            cfg,
            admission,
            records: VecDeque::new(),
            keys: HashSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cfg.capacity
    }

    /// Records from oldest to newest.
    pub fn records(&self) -> impl Iterator<Item = &ErrorRecord> {
        self.records.iter()
    }

    fn check(&self, r: &ErrorRecord) -> Result<()> {
        if !r.acc_at_capture.is_finite() || !self.admission.admits(r.acc_at_capture) {
            return Err(Error::Rejected(format!(
                "capture accuracy {} outside ({}, {})",
                r.acc_at_capture, self.admission.low, self.admission.high
            )));
        }
        if verify_against(&r.ground_truth, &r.wrong_answer_text).correct {
            return Err(Error::Rejected(format!(
                "answer to problem {} is actually correct",
                r.problem_id
            )));
        }
        Ok(())
    }

    pub fn insert(&mut self, record: ErrorRecord) -> Result<Insert> {
        self.check(&record)?;
        let key = record.key();
        if self.keys.contains(&key) {
            return Ok(Insert::Duplicate);
        }
        let mut outcome = Insert::Accepted;
        if self.records.len() == self.cfg.capacity {
            if let Some(old) = self.records.pop_front() {
                self.keys.remove(&old.key());
            }
            outcome = Insert::AcceptedWithEviction;
        }
        self.keys.insert(key);
        self.records.push_back(record);
        Ok(outcome)
    }

    /// Draws `min(k, len)` distinct records uniformly at random and bumps
    /// their `consumed_count`. The returned copies carry the updated count.
    pub fn sample_batch(&mut self, k: usize, seed: u64) -> Result<Vec<ErrorRecord>> {
        if k == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.records.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = k.min(self.records.len());
        let picks = rand::seq::index::sample(&mut rng, self.records.len(), take);
        Ok(picks
            .iter()
            .map(|i| {
                let r = &mut self.records[i];
                r.consumed_count += 1;
                r.clone()
            })
            .collect())
    }

    /// Writes every record, oldest first, one JSON object per line.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let all: Vec<&ErrorRecord> = self.records.iter().collect();
        jsonl::write_lines(path, &all)
    }

    pub fn load(path: &Path, cfg: PoolConfig, admission: Admission) -> Result<Self> {
        let records: Vec<ErrorRecord> = jsonl::read_lines(path)?;
        let mut pool = ErrorPool::new(cfg, admission)?;
        if records.len() > cfg.capacity {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: cfg.capacity + 1,
                message: format!("pool file exceeds capacity {}", cfg.capacity),
            });
        }
        for (i, r) in records.into_iter().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            pool.check(&r).map_err(|e| parse_err(e.to_string()))?;
            if !pool.keys.insert(r.key()) {
                return Err(parse_err("duplicate record".into()));
            }
            pool.records.push_back(r);
        }
        Ok(pool)
    }
}
