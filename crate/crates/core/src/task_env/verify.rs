use super::problem::Problem;

/// Literal that introduces the final answer in a response.
pub const ANSWER_MARKER: &str = "Answer:";

/// Outcome of checking one response. `correct` doubles as the scalar reward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub correct: bool,
    pub extracted: Option<String>,
}

impl Verdict {
    pub fn reward(&self) -> f64 {
        if self.correct {
            1.0
        } else {
            0.0
        }
    }
}

/// Canonical decimal form of an integer string: optional minus sign, no
/// leading zeros, and `-0` folded to `0`. Returns `None` for anything that
/// is not an optionally signed run of ASCII digits.
pub fn canonicalize(s: &str) -> Option<String> {
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return Some("0".to_string());
    }
    Some(if neg {
        format!("-{trimmed}")
    } else {
        trimmed.to_string()
    })
}

/// Extracts the text after the last `Answer:` and compares it with the
/// ground truth. A missing marker or a non-numeric answer is simply wrong.
pub fn verify(problem: &Problem, response_text: &str) -> Verdict {
    verify_against(&problem.ground_truth, response_text)
}

pub fn verify_against(ground_truth: &str, response_text: &str) -> Verdict {
    let extracted = response_text
        .rfind(ANSWER_MARKER)
        .and_then(|pos| canonicalize(&response_text[pos + ANSWER_MARKER.len()..]));
    let correct = match (&extracted, canonicalize(ground_truth)) {
        (Some(e), Some(gt)) => *e == gt,
        _ => false,
    };
    Verdict { correct, extracted }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(s: &str) -> Problem {
        Problem::new(0, "5+7=?".into(), s.into(), 1).unwrap()
    }

    #[test]
    fn exact_match_and_mismatch() {
        assert!(verify(&gt("12"), "... Answer: 12").correct);
        let v = verify(&gt("12"), "... Answer: 13");
        assert!(!v.correct);
        assert_eq!(v.extracted.as_deref(), Some("13"));
    }

    #[test]
    fn missing_marker_is_wrong_without_extraction() {
        let v = verify(&gt("12"), "no marker here");
        assert!(!v.correct);
        assert!(v.extracted.is_none());
    }

    #[test]
    fn last_marker_wins() {
        assert!(verify(&gt("12"), "Answer: 11 hmm Answer: 12").correct);
        assert!(!verify(&gt("12"), "Answer: 12 hmm Answer: 11").correct);
    }

    #[test]
    fn non_numeric_is_not_extracted() {
        let v = verify(&gt("12"), "Answer: twelve");
        assert!(!v.correct && v.extracted.is_none());
        assert!(verify(&gt("12"), "Answer:").extracted.is_none());
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonicalize("007").as_deref(), Some("7"));
        assert_eq!(canonicalize("-0").as_deref(), Some("0"));
        assert_eq!(canonicalize("-000").as_deref(), Some("0"));
        assert_eq!(canonicalize("-012").as_deref(), Some("-12"));
        assert_eq!(canonicalize(" 5 ").as_deref(), Some("5"));
        assert_eq!(canonicalize("1 2"), None);
        assert_eq!(canonicalize("-"), None);
        assert!(verify(&gt("0"), "Answer: -0").correct);
        assert!(verify(&gt("12"), "Answer: 0012").correct);
    }
}
