use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{MpcError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_special(id: u32) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// Token ↔ id bijection with the five reserved specials at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary of the specials followed by `words` in order.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::try_from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace tokenization; out-of-vocabulary words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.id(&w)).collect()
    }

    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = MpcError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(MpcError::invalid("vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(MpcError::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Specials plus the most frequent words, ties broken lexicographically,
/// capped at `max_size` entries in total.
pub fn build_vocab<'a, I>(utterances: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if max_size <= NUM_SPECIAL {
        return Err(MpcError::invalid(format!("max vocabulary size must exceed {NUM_SPECIAL}")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for words in utterances {
        for w in words {
            if SPECIAL_TOKENS.contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(MpcError::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_words(ranked.into_iter().take(max_size - NUM_SPECIAL).map(|(w, _)| w.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        split_words(s).collect()
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab([words("a a b").as_slice()], 8).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let v = build_vocab([words("y x").as_slice()], 8).unwrap();
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("y"), 6);
    }

    #[test]
    fn empty_corpus_and_tiny_cap_are_rejected() {
        assert!(build_vocab(std::iter::empty::<&[String]>(), 8).is_err());
        assert!(build_vocab([words("a").as_slice()], 5).is_err());
    }

    #[test]
    fn cap_is_respected_on_a_large_corpus() {
        // 10k tokens over 1000 distinct words with uneven frequencies.
        let text: Vec<String> = (0..10_000).map(|i| format!("w{}", (i * 7919) % 1000 % (1 + i % 997))).collect();
        let mut distinct = text.clone();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() >= 507);
        let v = build_vocab([text.as_slice()], 512).unwrap();
        assert_eq!(v.len(), 512);
    }

    #[test]
    fn encode_lowercases_and_maps_oov_to_unk() {
        let v = Vocabulary::from_words(["hello", "world"]).unwrap();
        assert_eq!(v.encode("Hello  WORLD  zebra"), vec![5, 6, UNK]);
        assert_eq!(v.decode(&[CLS, 5]), "[CLS] hello");
    }

    #[test]
    fn specials_are_fixed() {
        assert!(Vocabulary::try_from(vec!["[UNK]".to_string()]).is_err());
        let v = Vocabulary::from_words(Vec::<String>::new()).unwrap();
        assert_eq!(v.id("[MASK]"), MASK);
        assert_eq!(v.id("[SEP]"), SEP);
    }
}
