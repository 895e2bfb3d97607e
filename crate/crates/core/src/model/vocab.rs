use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<sot>";
pub const END_TOKEN: &str = "<eot>";

pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPE_WORDS: [&str; 2] = ["square", "circle"];
pub const COUNT_WORDS: [&str; 5] = ["one", "two", "three", "four", "five"];
const FILLER_WORDS: [&str; 6] = ["and", "a", "photo", "of", "with", "some"];

/// Ordered token list. The start marker sits at index 0 and the end marker
/// at the last index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        let mut tokens = vec![START_TOKEN.to_string()];
        for w in COLOR_WORDS
            .iter()
            .chain(&SHAPE_WORDS)
            .chain(&COUNT_WORDS)
            .chain(&FILLER_WORDS)
        {
            tokens.push(w.to_string());
        }
        tokens.push(END_TOKEN.to_string());
        Self { tokens }
    }
}

impl TokenVocabulary {
    /// Rebuilds a vocabulary from a stored token list, checking the marker positions.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2
            || tokens[0] != START_TOKEN
            || tokens[tokens.len() - 1] != END_TOKEN
        {
            return Err(Error::Checkpoint(format!(
                "vocabulary must start with {START_TOKEN} and end with {END_TOKEN}"
            )));
        }
        Ok(Self { tokens })
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

    pub fn start(&self) -> usize {
        0
    }

    pub fn end(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// The empty prompt used for the unconditional branch.
    pub fn unconditional(&self) -> Vec<usize> {
        vec![self.start(), self.end()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_at_the_ends() {
        let v = TokenVocabulary::default();
        assert_eq!(v.id(START_TOKEN).unwrap(), 0);
        assert_eq!(v.id(END_TOKEN).unwrap(), v.len() - 1);
        assert!(matches!(v.id("purple"), Err(Error::UnknownToken(_))));
        assert!(TokenVocabulary::from_tokens(vec!["red".into()]).is_err());
    }
}
