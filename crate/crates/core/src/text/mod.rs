//! Question/answer text: normalisation, word tokenisation, the shared
//! vocabulary and dataset ingestion.

mod dataset;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use dataset::{load_dataset, parse_tsv, split, DatasetFormat, DatasetStats, QADataset, QAPair};
pub use vocab::{build_vocab, decode_ids, encode, encode_counted, EncodeStats, Vocabulary, END, PAD, START, UNK};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    Encoding { offset: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Ingestion(String),
    #[error("token id {id} outside vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Punctuation split off the end of a word: Latin terminals plus the
/// Bengali danda and double danda.
/// Bundled 32-pair Bengali question/answer corpus in TSV form.
pub const DEMO_CORPUS: &str = include_str!("../../data/demo.tsv");

pub fn demo_dataset() -> QADataset {
    parse_tsv(DEMO_CORPUS).expect("bundled corpus parses")
}

pub const TERMINAL_PUNCTUATION: &[char] = &['?', '!', '.', ',', ';', ':', '।', '॥'];

pub fn decode_utf8(bytes: &[u8]) -> Result<&str, TextError> {
    std::str::from_utf8(bytes).map_err(|e| TextError::Encoding {
        offset: e.valid_up_to(),
    })
}

/// Canonical composition, trimmed, with internal whitespace runs collapsed.
///
/// Composition keeps combining marks (vowel signs, virama) attached to their
/// base characters, and whitespace splitting never falls inside a cluster.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    composed.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let core = word.trim_end_matches(TERMINAL_PUNCTUATION);
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(word[core.len()..].chars().map(String::from));
    }
    tokens
}

/// Joins tokens with spaces, re-attaching detached terminal punctuation to
/// the preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let is_punct = tok.chars().count() == 1 && tok.chars().all(|c| TERMINAL_PUNCTUATION.contains(&c));
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
