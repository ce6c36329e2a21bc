use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::CaptionError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

pub const MAX_WORDS: usize = 256;

/// Lowercased alphanumeric words; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'')).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Bijective word ↔ id table with PAD/BOS/EOS fixed at 0/1/2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from caption texts, keeping at most
    /// [`MAX_WORDS`] words by frequency (ties broken alphabetically). Word
    /// ids are assigned alphabetically so the table does not depend on the
    /// order of the input.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in tokenize(c) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if by_freq.len() > MAX_WORDS {
            log::warn!("vocabulary truncated from {} to {MAX_WORDS} words", by_freq.len());
            by_freq.truncate(MAX_WORDS);
        }
        let mut words: Vec<String> = by_freq.into_iter().map(|(w, _)| w).collect();
        words.sort();
        Self::from_words(words)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let mut v = Self { tokens, index: HashMap::new() };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Restores the lookup table after deserialisation.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CaptionError> {
        if tokens.len() < 3 || tokens[..3].iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(CaptionError::InvalidVocabulary("reserved tokens missing".into()));
        }
        let mut v = Self { tokens, index: HashMap::new() };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(CaptionError::InvalidVocabulary("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `BOS w1 … wn EOS`.
    pub fn encode(&self, text: &str) -> Result<Caption, CaptionError> {
        let mut ids = vec![BOS];
        for w in tokenize(text) {
            ids.push(self.id(&w).ok_or(CaptionError::UnknownToken(w))?);
        }
        ids.push(EOS);
        Ok(Caption { tokens: ids })
    }

    /// Words between BOS and EOS joined by spaces; reserved ids are skipped.
    pub fn decode(&self, caption: &Caption) -> String {
        caption.tokens.iter().filter(|&&t| t > EOS).filter_map(|&t| self.word(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Token ids starting with BOS and ending with EOS; training batches may
/// append PAD after the EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<usize>,
}

impl Caption {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.resize(len.max(tokens.len()), PAD);
        Self { tokens }
    }

    /// BOS first, EOS last (ignoring trailing PAD), within `max_len`.
    pub fn is_well_formed(&self, max_len: usize) -> bool {
        let trimmed: Vec<usize> = {
            let mut t = self.tokens.clone();
            while t.last() == Some(&PAD) {
                t.pop();
            }
            t
        };
        trimmed.len() >= 2 && trimmed.len() <= max_len && trimmed[0] == BOS && *trimmed.last().unwrap() == EOS
    }
}
