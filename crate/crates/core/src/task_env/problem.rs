use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, BOS};
use crate::error::{Error, Result};

/// Suffix every prompt ends with.
pub const ANSWER_REQUEST: &str = "=?";

pub const MAX_DIFFICULTY: u32 = 6;

/// Which operators the generator may draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpMix {
    Add,
    Sub,
    #[default]
    Both,
}

/// One synthetic arithmetic task with an exact answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: u64,
    pub prompt_text: String,
    pub prompt_tokens: Vec<TokenId>,
    pub ground_truth: String,
    pub difficulty: u32,
}

impl Problem {
    pub fn new(id: u64, prompt_text: String, ground_truth: String, difficulty: u32) -> Result<Self> {
        let prompt_tokens = Vocabulary::standard().encode(&prompt_text)?;
        Ok(Problem {
            id,
            prompt_text,
            prompt_tokens,
            ground_truth,
            difficulty,
        })
    }

    /// Prompt as fed to the policy: beginning-of-sequence followed by the prompt tokens.
    pub fn policy_prompt(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.prompt_tokens.len() + 1);
        out.push(BOS);
        out.extend_from_slice(&self.prompt_tokens);
        out
    }
}

/// Generates `count` two-operand problems mixing addition and subtraction.
pub fn generate_problems(seed: u64, count: usize, difficulty: u32) -> Result<Vec<Problem>> {
    generate_problems_with(seed, count, difficulty, OpMix::Both)
}

/// Like [`generate_problems`] with an explicit operator mix.
///
/// Operands have exactly `difficulty` decimal digits (single digits include 0).
pub fn generate_problems_with(
    seed: u64,
    count: usize,
    difficulty: u32,
    ops: OpMix,
) -> Result<Vec<Problem>> {
    if !(1..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(Error::Config(format!(
            "difficulty must be in 1..={MAX_DIFFICULTY}, got {difficulty}"
        )));
    }
    if count == 0 {
        return Err(Error::Config("problem count must be at least 1".into()));
    }
    let (lo, hi) = operand_range(difficulty);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let a: i64 = rng.random_range(lo..=hi);
            let b: i64 = rng.random_range(lo..=hi);
            let add = match ops {
                OpMix::Add => true,
                OpMix::Sub => false,
                OpMix::Both => rng.random_bool(0.5),
            };
            let (sym, value) = if add { ('+', a + b) } else { ('-', a - b) };
            Problem::new(
                i as u64,
                format!("{a}{sym}{b}{ANSWER_REQUEST}"),
                value.to_string(),
                difficulty,
            )
        })
        .collect()
}

fn operand_range(difficulty: u32) -> (i64, i64) {
    if difficulty == 1 {
        (0, 9)
    } else {
        (10i64.pow(difficulty - 1), 10i64.pow(difficulty) - 1)
    }
}

/// Evaluates a prompt of the form `a+b=?` or `a-b=?`.
pub fn evaluate_prompt(text: &str) -> Option<i64> {
    let body = text.strip_suffix(ANSWER_REQUEST)?;
    let (split, sym) = body
        .char_indices()
        .skip(1)
        .find(|(_, c)| *c == '+' || *c == '-')?;
    let a: i64 = body[..split].parse().ok()?;
    let b: i64 = body[split + 1..].parse().ok()?;
    Some(if sym == '+' { a + b } else { a - b })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProblemRecord {
    id: u64,
    prompt_text: String,
    ground_truth: String,
    difficulty: u32,
}

/// Writes problems as one JSON object per line.
pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in problems {
        let rec = ProblemRecord {
            id: p.id,
            prompt_text: p.prompt_text.clone(),
            ground_truth: p.ground_truth.clone(),
            difficulty: p.difficulty,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a problem file written by [`write_problems`], checking every answer.
pub fn read_problems(path: &Path) -> Result<Vec<Problem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ProblemRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match evaluate_prompt(&rec.prompt_text) {
            Some(v) if v.to_string() == rec.ground_truth => {}
            _ => return Err(parse_err("ground truth does not match the prompt".into())),
        }
        let p = Problem::new(rec.id, rec.prompt_text, rec.ground_truth, rec.difficulty)
            .map_err(|e| parse_err(e.to_string()))?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_inputs() {
        let a = generate_problems(7, 2, 2).unwrap();
        let b = generate_problems(7, 2, 2).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_problems(7, 8, 2).unwrap();
        let b = generate_problems(8, 8, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn single_digit_problems_look_right() {
        let ps = generate_problems_with(3, 50, 1, OpMix::Add).unwrap();
        for p in &ps {
            assert!(p.prompt_text.ends_with(ANSWER_REQUEST));
            assert_eq!(p.prompt_text.len(), 5, "{}", p.prompt_text);
            let a = (p.prompt_text.as_bytes()[0] - b'0') as i64;
            let b = (p.prompt_text.as_bytes()[2] - b'0') as i64;
            assert_eq!(p.ground_truth, (a + b).to_string());
        }
    }

    #[test]
    fn operand_digit_counts() {
        for d in 2..=4 {
            for p in generate_problems(11, 40, d).unwrap() {
                let body = p.prompt_text.strip_suffix("=?").unwrap();
                let parts: Vec<&str> = body.split(['+', '-']).collect();
                assert_eq!(parts.len(), 2);
                assert!(parts.iter().all(|s| s.len() == d as usize));
            }
        }
    }

    #[test]
    fn invalid_difficulty_and_count() {
        assert!(matches!(generate_problems(1, 1, 0), Err(Error::Config(_))));
        assert!(matches!(generate_problems(1, 1, 7), Err(Error::Config(_))));
        assert!(matches!(generate_problems(1, 0, 2), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_handles_both_operators() {
        assert_eq!(evaluate_prompt("3+4=?"), Some(7));
        assert_eq!(evaluate_prompt("13-40=?"), Some(-27));
        assert_eq!(evaluate_prompt("13*40=?"), None);
        assert_eq!(evaluate_prompt("13+40"), None);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let ps = generate_problems(5, 25, 3).unwrap();
        write_problems(&path, &ps).unwrap();
        assert_eq!(read_problems(&path).unwrap(), ps);
    }

    #[test]
    fn import_rejects_wrong_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(
            &path,
            "{\"id\":0,\"prompt_text\":\"1+1=?\",\"ground_truth\":\"2\",\"difficulty\":1}\n\
             {\"id\":1,\"prompt_text\":\"1+2=?\",\"ground_truth\":\"4\",\"difficulty\":1}\n",
        )
        .unwrap();
        match read_problems(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }
}
