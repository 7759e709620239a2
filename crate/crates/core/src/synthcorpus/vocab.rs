//! Token vocabulary with fixed special entries.
//!
//! Ids 0 through 3 are reserved: sequence start, sequence end, padding,
//! and the unknown-word fallback, in that order. Content words follow,
//! ordered by descending training-set count with ties broken
//! alphabetically, so the id assignment is a pure function of the counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = ["<s>", "</s>", "<pad>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized captions, keeping words that
    /// appear at least `min_count` times.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in captions {
            for word in caption {
                *counts.entry(word.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, n)| n >= min_count && !SPECIALS.contains(&w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(w, _)| w.to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps words to ids, substituting the unknown id for words outside
    /// the vocabulary.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Maps ids back to words. Ids outside the table are an error: they
    /// can only come from a corrupted caption, never from sampling.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(String::from)
                    .ok_or(Error::UnknownToken {
                        id,
                        vocab: self.len(),
                    })
            })
            .collect()
    }

    /// Writes one token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Vocab(format!(
                "{}: {} lines, expected at least {}",
                path.display(),
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Vocab(format!(
                    "{}: line {} is {:?}, expected {:?}",
                    path.display(),
                    i + 1,
                    tokens[i],
                    s
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t.clone()) {
                return Err(Error::Vocab(format!(
                    "{}: duplicate token {:?}",
                    path.display(),
                    t
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
