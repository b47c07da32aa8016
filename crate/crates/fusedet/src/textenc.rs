//! Text side of the fusion input: a hashing tokenizer and a learned
//! embedding table.
//!
//! There is no fixed vocabulary. Words are lowercased, split on
//! non-alphanumeric boundaries, and hashed into a fixed number of buckets,
//! so any description maps to ids without an external vocab file.

use numcore::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Embedding rows available to the hash. Ids are in `0..buckets`.
    pub buckets: usize,
    /// Words longer than this are truncated before hashing.
    pub word_maxlen: usize,
    /// Token sequences longer than this are truncated.
    pub sent_maxlen: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer { buckets: 4096, word_maxlen: 41, sent_maxlen: 35 }
    }
}

impl Tokenizer {
    /// Maps a description to embedding-table ids. Empty or all-punctuation
    /// text is an error: every sample is expected to carry a description.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let lower = text.to_lowercase();
        let mut ids = Vec::new();
        for word in lower.split(|c: char| !c.is_alphanumeric()) {
            if word.is_empty() {
                continue;
            }
            let truncated: String = word.chars().take(self.word_maxlen).collect();
            ids.push((fnv1a(truncated.as_bytes()) % self.buckets as u64) as usize);
            if ids.len() == self.sent_maxlen {
                break;
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(ids)
    }
}

/// FNV-1a over the word bytes. Stable across platforms and runs, which keeps
/// token ids (and therefore checkpoints) portable.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Learned `[buckets, dim]` table looked up by token id.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub buckets: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(name: &str, buckets: usize, dim: usize) -> Self {
        EmbeddingTable { name: name.to_string(), buckets, dim }
    }

    /// Embeds `ids` into an `[n, dim]` matrix on the tape. The table is a
    /// single named parameter; repeated ids share rows and accumulate
    /// gradients there.
    pub fn embed(&self, tape: &mut Tape, init: &numcore::Tensor, ids: &[usize]) -> Result<Var> {
        let table = tape.param(&self.name, init);
        let mut flat = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= self.buckets {
                return Err(Error::Build(format!(
                    "token id {} out of range for {} buckets",
                    id, self.buckets
                )));
            }
            for d in 0..self.dim {
                flat.push(id * self.dim + d);
            }
        }
        let gathered = tape.gather(table, flat)?;
        Ok(tape.reshape(gathered, vec![ids.len(), self.dim])?)
    }
}
