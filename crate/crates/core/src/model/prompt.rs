//! Hash-based stand-in for a text encoder.
//!
//! Whitespace-separated words become tokens; each token's embedding row is
//! drawn from a ChaCha stream keyed by a hash of the model seed, the encoder
//! range and the word. Identical text always yields identical rows.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::tensor::Matrix;

pub const PAD_TOKEN: &str = "<pad>";

/// Token id stored at padded positions.
pub const PAD_ID: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub text: String,
    /// One id per sequence position; [`PAD_ID`] at padding.
    pub tokens: Vec<u64>,
    /// `text_len × width`.
    pub embedding: Matrix,
    /// Every sequence range occupied by each word.
    pub word_spans: BTreeMap<String, Vec<Range<usize>>>,
}

impl PromptEmbedding {
    /// Sequence positions of every occurrence of `word`.
    pub fn positions_of(&self, word: &str) -> BTreeSet<usize> {
        self.word_spans
            .get(word)
            .into_iter()
            .flatten()
            .flat_map(|r| r.clone())
            .collect()
    }
}

/// FNV-1a, 64-bit.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // Separator so ("ab", "c") and ("a", "bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn token_id(seed: u64, encoder: &str, word: &str) -> u64 {
    let id = fnv1a(&[&seed.to_le_bytes(), encoder.as_bytes(), word.as_bytes()]);
    if id == PAD_ID {
        1
    } else {
        id
    }
}

fn embedding_row(seed: u64, encoder: &str, word: &str, width: usize) -> Vec<f64> {
    let key = fnv1a(&[b"embed", &seed.to_le_bytes(), encoder.as_bytes(), word.as_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let bound = 3f64.sqrt();
    (0..width).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Sequence ranges and names of the emulated encoders. A dual-encoder config
/// splits the text sequence into two halves that each hold the full prompt.
fn encoder_ranges(cfg: &ModelConfig) -> Vec<(&'static str, Range<usize>)> {
    if cfg.dual_encoder {
        let half = cfg.text_len / 2;
        vec![("clip", 0..half), ("t5", half..cfg.text_len)]
    } else {
        vec![("t5", 0..cfg.text_len)]
    }
}

pub fn encode_prompt(text: &str, cfg: &ModelConfig) -> PromptEmbedding {
    let width = cfg.width();
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut tokens = vec![PAD_ID; cfg.text_len];
    let mut rows = vec![0.0; cfg.text_len * width];
    let mut word_spans: BTreeMap<String, Vec<Range<usize>>> = BTreeMap::new();

    for (encoder, range) in encoder_ranges(cfg) {
        let pad = embedding_row(cfg.seed, encoder, PAD_TOKEN, width);
        for pos in range.clone() {
            let row = &mut rows[pos * width..(pos + 1) * width];
            match words.get(pos - range.start) {
                Some(word) => {
                    tokens[pos] = token_id(cfg.seed, encoder, word);
                    row.copy_from_slice(&embedding_row(cfg.seed, encoder, word, width));
                    word_spans
                        .entry((*word).to_owned())
                        .or_default()
                        .push(pos..pos + 1);
                }
                None => row.copy_from_slice(&pad),
            }
        }
    }

    PromptEmbedding {
        text: text.to_owned(),
        tokens,
        embedding: Matrix::new(cfg.text_len, width, rows).expect("finite by construction"),
        word_spans,
    }
}

/// Positions of words present in only one of the two prompts.
pub fn changed_token_positions(src: &PromptEmbedding, tgt: &PromptEmbedding) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for (word, spans) in &src.word_spans {
        if !tgt.word_spans.contains_key(word) {
            out.extend(spans.iter().flat_map(|r| r.clone()));
        }
    }
    for (word, spans) in &tgt.word_spans {
        if !src.word_spans.contains_key(word) {
            out.extend(spans.iter().flat_map(|r| r.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn empty_prompt_is_all_padding() {
        let p = encode_prompt("", &cfg());
        assert!(p.word_spans.is_empty());
        assert!(p.tokens.iter().all(|&t| t == PAD_ID));
        for r in 1..p.embedding.rows() {
            assert_eq!(p.embedding.row(r), p.embedding.row(0));
        }
    }

    #[test]
    fn deterministic() {
        let a = encode_prompt("a panda on the beach", &cfg());
        let b = encode_prompt("a panda on the beach", &cfg());
        assert!(a.embedding.bit_eq(&b.embedding));
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn shared_words_share_rows() {
        let a = encode_prompt("a panda", &cfg());
        let b = encode_prompt("a dragon", &cfg());
        assert_eq!(a.embedding.row(0), b.embedding.row(0));
        assert_ne!(a.embedding.row(1), b.embedding.row(1));
        assert_ne!(a.tokens[1], b.tokens[1]);
        assert_eq!(changed_token_positions(&a, &b), [1].into());
    }

    #[test]
    fn seed_changes_embedding() {
        let mut other = cfg();
        other.seed = 99;
        let a = encode_prompt("a panda", &cfg());
        let b = encode_prompt("a panda", &other);
        assert_ne!(a.embedding.row(1), b.embedding.row(1));
    }

    #[test]
    fn truncation_and_repeats() {
        let long = (0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let p = encode_prompt(&long, &cfg());
        assert_eq!(p.word_spans.len(), 16);
        assert!(p.word_spans.contains_key("w15"));
        assert!(!p.word_spans.contains_key("w16"));

        let p = encode_prompt("a cat and a dog", &cfg());
        assert_eq!(p.positions_of("a"), [0, 3].into());
    }

    #[test]
    fn dual_encoder_ranges() {
        let mut c = cfg();
        c.dual_encoder = true;
        let p = encode_prompt("a red fox", &c);
        assert_eq!(p.positions_of("fox"), [2, 10].into());
        // Different encoders give different rows for the same word.
        assert_ne!(p.embedding.row(2), p.embedding.row(10));
    }

    #[test]
    fn fnv_separates_parts() {
        assert_ne!(fnv1a(&[b"ab", b"c"]), fnv1a(&[b"a", b"bc"]));
    }
}
