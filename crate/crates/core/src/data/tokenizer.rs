//! Word-level tokenizer: lowercased, whitespace/punctuation split, with a
//! frequency floor mapping rare words to UNK.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const CLS_ID: usize = 3;
pub const UNK_ID: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<cls>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    /// id -> token, specials first, then words in lexicographic order.
    vocab: Vec<String>,
    /// Captions are truncated to this many word tokens before framing.
    max_tokens: usize,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_tokens: usize,
    ) -> Result<Tokenizer> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for caption in corpus {
            any = true;
            for w in normalize(caption) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Data("tokenizer corpus is empty".into()));
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(
            freq.into_iter()
                .filter(|(_, c)| *c >= min_freq)
                .map(|(w, _)| w),
        );
        Ok(Tokenizer::from_vocab(vocab, max_tokens))
    }

    /// Rebuilds a tokenizer from a serialized vocab list (checkpoint load).
    pub fn from_vocab(vocab: Vec<String>, max_tokens: usize) -> Tokenizer {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer {
            vocab,
            max_tokens,
            index,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// `[BOS, word ids..., EOS]` with rare words mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode_words(text));
        ids.push(EOS_ID);
        ids
    }

    /// Word ids only, no framing (used for prompt text).
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .into_iter()
            .take(self.max_tokens)
            .map(|w| self.id_of(&w))
            .collect()
    }

    /// Inverse of `encode` on in-vocab text: specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS.len() && id < self.vocab.len())
            .map(|&id| self.vocab[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let trimmed = w.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}
