//! Byte-level tokenization and corpus chunking.
//!
//! Tokens are raw bytes with id 0 reserved as BOS, so the vocabulary
//! stays at 256 and every chunk carries the pathology-relevant property:
//! a constant token at position 0. NUL bytes never occur in text corpora,
//! which is what the bundled corpus and prompts are.

use super::{Result, TrainError};

/// Reserved beginning-of-sequence token, prepended to every chunk.
pub const BOS_TOKEN: usize = 0;

/// Byte-level tokens with BOS prepended. `detokenize(tokenize(x)) == x`.
pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(bytes.len() + 1);
    out.push(BOS_TOKEN);
    out.extend(bytes.iter().map(|&b| b as usize));
    out
}

/// Inverse of [`tokenize`] modulo the prepended BOS.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens.iter().skip(1).map(|&t| t as u8).collect()
}

/// Split a byte stream into training chunks of exactly `seq_len` tokens
/// (BOS + seq_len-1 bytes); a shorter tail chunk is kept if it has at
/// least one prediction target. Non-BOS tokens are conserved.
pub fn chunk_tokens(bytes: &[u8], seq_len: usize) -> Vec<Vec<usize>> {
    assert!(seq_len >= 2, "chunks need at least one prediction target");
    bytes
        .chunks(seq_len - 1)
        .filter(|piece| !piece.is_empty())
        .map(tokenize)
        .collect()
}

/// Token chunks split into disjoint train and held-out sets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Vec<usize>>,
    pub held_out: Vec<Vec<usize>>,
    pub provenance: String,
}

impl Corpus {
    /// Chunk `bytes` and hold out every `held_out_every`-th chunk.
    ///
    /// Train chunks that exactly match a held-out chunk are dropped, so
    /// `train` and `held_out` are disjoint under exact comparison even
    /// for repetitive source text.
    pub fn build(bytes: &[u8], seq_len: usize, held_out_every: usize, provenance: &str) -> Result<Corpus> {
        assert!(held_out_every >= 2, "held_out_every must leave training data");
        let chunks = chunk_tokens(bytes, seq_len);
        if chunks.len() < 2 {
            return Err(TrainError::EmptyCorpus);
        }
        let mut train = Vec::new();
        let mut held_out = Vec::new();
        for (i, chunk) in chunks.into_iter().enumerate() {
            if i % held_out_every == held_out_every - 1 {
                held_out.push(chunk);
            } else {
                train.push(chunk);
            }
        }
        train.retain(|c| !held_out.contains(c));
        if train.is_empty() || held_out.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Corpus {
            train,
            held_out,
            provenance: provenance.to_string(),
        })
    }

    pub fn splits_are_disjoint(&self) -> bool {
        self.train.iter().all(|c| !self.held_out.contains(c))
    }
}

/// The bundled ~100KB natural-text corpus used for collapse induction
/// and surgical training when no corpus file is given.
pub fn builtin_corpus_text() -> &'static str {
    include_str!("../../assets/default_corpus.txt")
}

/// The bundled diagnostic prompt.
pub fn builtin_prompt_text() -> &'static str {
    include_str!("../../assets/diagnostic_prompt.txt")
}
