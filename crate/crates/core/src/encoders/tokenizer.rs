//! Lowercase word tokenizer with a corpus-built vocabulary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ids padded to `max_tokens`, with the validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub truncated: bool,
}

impl TokenizedText {
    /// Ids of the unpadded prefix.
    pub fn valid_ids(&self) -> Vec<u32> {
        self.ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

/// Splits on anything that is not alphanumeric, lowercasing each word.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    max_tokens: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Keeps the `vocab_size - 4` most frequent words (ties by spelling).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize, max_tokens: usize) -> Result<Self> {
        if vocab_size <= SPECIALS.len() {
            return Err(Error::config(format!("vocab_size {vocab_size} leaves no room for words")));
        }
        if max_tokens < 3 {
            return Err(Error::config("max_tokens must be at least 3"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocab = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(vocab_size)
            .collect();
        Ok(Self::from_vocab(vocab, max_tokens))
    }

    pub fn from_vocab(vocab: Vec<String>, max_tokens: usize) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            vocab,
            max_tokens,
            index,
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_vocab(self.vocab, self.max_tokens)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenizedText> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot tokenize an empty string"));
        }
        let ws = words(text);
        if ws.is_empty() {
            return Err(Error::validation(format!("no word tokens in {text:?}")));
        }
        let mut ids = Vec::with_capacity(ws.len() + 2);
        ids.push(BOS_ID);
        ids.extend(ws.iter().map(|w| self.id(w)));
        ids.push(EOS_ID);
        let truncated = ids.len() > self.max_tokens;
        if truncated {
            ids.truncate(self.max_tokens - 1);
            ids.push(EOS_ID);
        }
        let len = ids.len();
        ids.resize(self.max_tokens, PAD_ID);
        let mask = (0..self.max_tokens).map(|i| i < len).collect();
        Ok(TokenizedText {
            ids,
            mask,
            truncated,
        })
    }

    pub fn token_str(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(["A photo of hot dog, a type of food."], 64, 77).unwrap()
    }

    #[test]
    fn deterministic_ids() {
        let t = tok();
        let a = t.tokenize("A photo of hot dog, a type of food.").unwrap();
        let b = t.tokenize("A photo of hot dog, a type of food.").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        assert_eq!(a.ids.len(), 77);
        assert_eq!(a.ids[0], BOS_ID);
        assert_eq!(a.ids[10], EOS_ID);
        assert!(!a.truncated);
        let words: Vec<&str> = a.valid_ids().iter().map(|&i| t.token_str(i)).collect();
        assert_eq!(words[1..10], ["a", "photo", "of", "hot", "dog", "a", "type", "of", "food"]);
    }

    #[test]
    fn truncation_keeps_exact_length() {
        let t = tok();
        let long = vec!["food"; 200].join(" ");
        let out = t.tokenize(&long).unwrap();
        assert_eq!(out.ids.len(), 77);
        assert_eq!(out.len(), 77);
        assert!(out.truncated);
        assert_eq!(out.ids[76], EOS_ID);
    }

    #[test]
    fn unknown_and_empty() {
        let t = tok();
        assert_eq!(t.tokenize("sushi").unwrap().ids[1], UNK_ID);
        assert!(matches!(t.tokenize(""), Err(Error::Validation(_))));
        assert!(matches!(t.tokenize("  ... "), Err(Error::Validation(_))));
    }

    #[test]
    fn vocab_order_is_frequency_then_alpha() {
        let t = Tokenizer::build(["b a a", "c b a"], 6, 8).unwrap();
        assert_eq!(&t.vocab()[4..], ["a", "b"]);
    }
}
