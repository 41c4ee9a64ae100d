//! Disjoint problem sets for training, evaluation and warm start.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TaskConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::task_env::{generate_problems_with, Problem};

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Problem>,
    pub eval: Vec<Problem>,
    pub warm: Vec<Problem>,
}

const ROUNDS: u64 = 64;
const CHUNK: usize = 1024;

/// Draws distinct problems (by prompt text) spread evenly over the configured
/// difficulties, shuffles them, and cuts them into evaluation, warm-start and
/// training sets in that order. Ids are reassigned to be unique across sets.
pub fn build_splits(task: &TaskConfig, warm: usize, master: u64) -> Result<Splits> {
    let total = task.eval_size + warm + task.train_size;
    let kinds = task.difficulties.len();
    let mut seen = HashSet::new();
    let mut pools: Vec<Vec<Problem>> = Vec::new();
    for (slot, &d) in task.difficulties.iter().enumerate() {
        let want = total / kinds + usize::from(slot < total % kinds);
        let mut got = Vec::with_capacity(want);
        let mut round = 0;
        while got.len() < want {
            if round == ROUNDS {
                return Err(Error::Config(format!(
                    "only {} distinct problems of difficulty {d} found, {want} needed",
                    got.len()
                )));
            }
            let batch = generate_problems_with(seed::derive(master, 100 + d as u64, round), CHUNK, d, task.ops)?;
            for p in batch {
                if got.len() < want && seen.insert(p.prompt_text.clone()) {
                    got.push(p);
                }
            }
            round += 1;
        }
        pools.push(got);
    }
    let mut all: Vec<Problem> = pools.into_iter().flatten().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(master, 99, 0)));
    for (i, p) in all.iter_mut().enumerate() {
        p.id = i as u64;
    }
    let train = all.split_off(task.eval_size + warm);
    let warm_set = all.split_off(task.eval_size);
    Ok(Splits {
        train,
        eval: all,
        warm: warm_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_env::OpMix;

    fn task(d: Vec<u32>, train: usize) -> TaskConfig {
        TaskConfig {
            difficulties: d,
            ops: OpMix::Add,
            train_size: train,
            eval_size: 50,
        }
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let s = build_splits(&task(vec![2, 3], 400), 30, 7).unwrap();
        assert_eq!((s.train.len(), s.eval.len(), s.warm.len()), (400, 50, 30));
        let texts: HashSet<&str> = s
            .train
            .iter()
            .chain(&s.eval)
            .chain(&s.warm)
            .map(|p| p.prompt_text.as_str())
            .collect();
        assert_eq!(texts.len(), 480);
        let twos = s.train.iter().chain(&s.eval).chain(&s.warm).filter(|p| p.difficulty == 2).count();
        assert_eq!(twos, 240);
        let again = build_splits(&task(vec![2, 3], 400), 30, 7).unwrap();
        assert_eq!(s.eval, again.eval);
    }

    #[test]
    fn impossible_request_is_an_error() {
        // only 100 distinct single-digit additions exist
        assert!(build_splits(&task(vec![1], 100), 0, 0).is_err());
    }
}
