use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::Corpus;

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Word vocabulary with the four special tokens at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keeps every word seen at least `min_freq` times in the explanations,
    /// ordered by descending frequency and then lexicographically.
    pub fn build(train: &Corpus, min_freq: usize) -> Self {
        Self::from_texts(train.interactions().iter().map(|i| i.explanation.as_str()), min_freq)
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in tokenize_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !is_special(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w));
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn unk(&self) -> TokenId {
        3
    }

    pub fn is_special_id(&self, id: TokenId) -> bool {
        id < 4
    }

    /// Training target: word ids truncated to leave room for end-of-sentence,
    /// followed by end-of-sentence.
    pub fn encode_target(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let mut ids = tokenize(text, self);
        ids.truncate(max_len.saturating_sub(1));
        ids.push(self.eos());
        ids
    }

    /// Words of a generated sequence with special tokens other than unknown dropped.
    pub fn words(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id == self.unk() || !self.is_special_id(id))
            .map(|&id| self.word(id).to_string())
            .collect()
    }
}

fn is_special(w: &str) -> bool {
    matches!(w, PAD | BOS | EOS | UNK)
}

/// Lowercased word tokens; punctuation separates words and is dropped.
/// Apostrophes inside a word are kept.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether `phrase`, tokenized the same way, occurs contiguously in `words`.
pub fn mentions(words: &[String], phrase: &str) -> bool {
    let p = tokenize_words(phrase);
    !p.is_empty() && words.windows(p.len()).any(|w| w == p.as_slice())
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    tokenize_words(text)
        .iter()
        .map(|w| vocab.get(w).unwrap_or(vocab.unk()))
        .collect()
}

pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> String {
    vocab.words(ids).join(" ")
}
