//! Character-level vocabulary shared by the task generator, the policy and
//! the reflection template.
//!
//! Every printable character used by problems, answers and the fixed prompt
//! templates is one token. Three special ids sit in front of the characters:
//! padding, beginning-of-sequence and end-of-sequence. The two reflection
//! markers are ordinary multi-token strings located by subsequence search.

use std::collections::HashMap;
use std::sync::LazyLock;

use crate::error::{Error, Result};

/// Token id type used throughout the crate.
pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

/// Zero-width separator used to break up marker strings that appear inside
/// untrusted slot text.
pub const ZERO_WIDTH_SEPARATOR: char = '\u{200B}';

pub const ANALYSIS_MARKER: &str = "**Analysis:**";
pub const CORRECTED_MARKER: &str = "**Corrected Solution:**";

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const PUNCTUATION: &str = "\n +-=?:*.,[]!'()";

static STANDARD: LazyLock<Vocabulary> = LazyLock::new(Vocabulary::build);

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    char_id: HashMap<char, TokenId>,
    analysis_mark: Vec<TokenId>,
    corrected_mark: Vec<TokenId>,
}

impl Vocabulary {
    /// The process-wide vocabulary.
    pub fn standard() -> &'static Vocabulary {
        &STANDARD
    }

    fn build() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let chars = std::iter::once(ZERO_WIDTH_SEPARATOR)
            .chain(PUNCTUATION.chars())
            .chain('0'..='9')
            .chain('a'..='z')
            .chain('A'..='Z');
        tokens.extend(chars.map(|c| c.to_string()));

        let id_of: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let char_id = tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (t.chars().next().unwrap(), i as TokenId))
            .collect();
        let mut vocab = Vocabulary {
            tokens,
            id_of,
            char_id,
            analysis_mark: Vec::new(),
            corrected_mark: Vec::new(),
        };
        vocab.analysis_mark = vocab.encode(ANALYSIS_MARKER).expect("marker is in vocabulary");
        vocab.corrected_mark = vocab.encode(CORRECTED_MARKER).expect("marker is in vocabulary");
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn analysis_mark(&self) -> &[TokenId] {
        &self.analysis_mark
    }

    pub fn corrected_mark(&self) -> &[TokenId] {
        &self.corrected_mark
    }

    /// Encodes text one character per token. Fails on the first character the
    /// vocabulary does not contain.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(index, symbol)| {
                self.char_id
                    .get(&symbol)
                    .copied()
                    .ok_or(Error::Encoding { symbol, index })
            })
            .collect()
    }

    /// Decodes ids back to text. Special tokens render as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.token(id))
            .collect()
    }
}

/// Position of the first occurrence of `needle` in `haystack` at or after `from`.
pub fn find_subsequence(haystack: &[TokenId], needle: &[TokenId], from: usize) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (from..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_form_a_bijection() {
        let v = Vocabulary::standard();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id_of(t), Some(i as TokenId));
        }
        assert_eq!(v.id_of.len(), v.len());
    }

    #[test]
    fn round_trip_and_empty() {
        let v = Vocabulary::standard();
        assert_eq!(v.decode(&v.encode("1+2=?").unwrap()), "1+2=?");
        assert!(v.encode("").unwrap().is_empty());
    }

    #[test]
    fn out_of_vocabulary_symbol_is_named() {
        let err = Vocabulary::standard().encode("12#3").unwrap_err();
        match err {
            Error::Encoding { symbol, index } => {
                assert_eq!(symbol, '#');
                assert_eq!(index, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn markers_are_distinct_and_not_nested() {
        let v = Vocabulary::standard();
        let a = v.analysis_mark();
        let c = v.corrected_mark();
        assert!(!a.is_empty() && !c.is_empty());
        assert!(find_subsequence(a, c, 0).is_none());
        assert!(find_subsequence(c, a, 0).is_none());
    }

    #[test]
    fn specials_decode_to_nothing() {
        let v = Vocabulary::standard();
        let mut ids = vec![BOS];
        ids.extend(v.encode("7").unwrap());
        ids.push(EOS);
        assert_eq!(v.decode(&ids), "7");
    }

    #[test]
    fn subsequence_search() {
        assert_eq!(find_subsequence(&[1, 2, 3, 2, 3], &[2, 3], 0), Some(1));
        assert_eq!(find_subsequence(&[1, 2, 3, 2, 3], &[2, 3], 2), Some(3));
        assert_eq!(find_subsequence(&[1, 2], &[2, 3], 0), None);
        assert_eq!(find_subsequence(&[1, 2], &[], 0), None);
    }
}
