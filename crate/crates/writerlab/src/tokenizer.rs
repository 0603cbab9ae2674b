//! Character-level tokenizer with a fixed block of special tokens.
//!
//! Specials occupy ids 0..7 (PAD, BOS, EOS, SEP and one tag per downstream
//! task); character entries follow in sorted codepoint order, so identical
//! corpora always produce identical id assignments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::TaskId;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const TASK_WORLD: usize = 4;
pub const TASK_PLOT: usize = 5;
pub const TASK_WRITE: usize = 6;
pub const N_SPECIALS: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    chars: Vec<char>,
    #[serde(skip)]
    index: BTreeMap<char, usize>,
}

impl Tokenizer {
    /// Sorted unique codepoints of the corpus plus the 7 specials.
    pub fn build_vocab(corpus: &str) -> Result<Tokenizer> {
        if corpus.is_empty() {
            return Err(Error::Ingest("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut chars: Vec<char> = corpus.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Tokenizer::from_chars(chars))
    }

    pub fn from_chars(chars: Vec<char>) -> Tokenizer {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, N_SPECIALS + i)).collect();
        Tokenizer { chars, index }
    }

    /// Rebuild the char index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.chars.iter().enumerate().map(|(i, &c)| (c, N_SPECIALS + i)).collect();
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIALS + self.chars.len()
    }

    pub fn task_tag(task: TaskId) -> Result<usize> {
        match task {
            TaskId::World => Ok(TASK_WORLD),
            TaskId::Plot => Ok(TASK_PLOT),
            TaskId::Writing => Ok(TASK_WRITE),
            TaskId::Foundation => {
                Err(Error::Contract("foundation pretraining has no task tag".into()))
            }
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Domain(format!("character {:?} not in vocabulary", c)))
            })
            .collect()
    }

    /// Decode ids back to text. Special tokens render as nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id < N_SPECIALS {
                    None
                } else {
                    self.chars.get(id - N_SPECIALS).copied()
                }
            })
            .collect()
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }
}

/// Token ids with a parallel loss mask (true where loss applies).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != loss_mask.len() {
            return Err(Error::Shape(format!(
                "token sequence has {} ids but {} mask entries",
                ids.len(),
                loss_mask.len()
            )));
        }
        Ok(TokenSequence { ids, loss_mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Pad with PAD tokens (no loss) up to `len`.
    pub fn pad(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.loss_mask.push(false);
        }
    }

    /// Truncate in place to at most `max_len` tokens. Returns true if cut.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        if self.ids.len() > max_len {
            self.ids.truncate(max_len);
            self.loss_mask.truncate(max_len);
            true
        } else {
            false
        }
    }
}
