use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{QADataset, TextError};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Shared question+answer vocabulary with reserved ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in id order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str, TextError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TextError::Vocabulary {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Every token seen at least `min_count` times across questions and answers
/// gets an id, by descending frequency with code-point order on ties.
pub fn build_vocab(dataset: &QADataset, min_count: usize) -> Result<Vocabulary, TextError> {
    if dataset.is_empty() {
        return Err(TextError::Ingestion("cannot build a vocabulary from an empty dataset".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for pair in dataset.pairs() {
        for tok in pair.question.iter().chain(&pair.answer) {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_words(kept.into_iter().map(|(t, _)| t.to_string())))
}

/// Counters for the silent parts of [`encode`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub truncated: usize,
    pub unknown: usize,
}

impl std::ops::AddAssign for EncodeStats {
    fn add_assign(&mut self, rhs: Self) {
        self.truncated += rhs.truncated;
        self.unknown += rhs.unknown;
    }
}

/// Fixed-length id sequence of `max_len + 2`: tokens truncated to `max_len`,
/// optional START/END, PAD-filled.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize, add_start: bool, add_end: bool) -> Vec<usize> {
    encode_counted(tokens, vocab, max_len, add_start, add_end).0
}

pub fn encode_counted<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_len: usize,
    add_start: bool,
    add_end: bool,
) -> (Vec<usize>, EncodeStats) {
    assert!(max_len >= 1, "max_len must be positive");
    let mut stats = EncodeStats::default();
    let mut ids = Vec::with_capacity(max_len + 2);
    if add_start {
        ids.push(START);
    }
    if tokens.len() > max_len {
        stats.truncated = 1;
    }
    for tok in tokens.iter().take(max_len) {
        let id = vocab.id(tok.as_ref());
        if id == UNK {
            stats.unknown += 1;
        }
        ids.push(id);
    }
    if add_end {
        ids.push(END);
    }
    ids.resize(max_len + 2, PAD);
    (ids, stats)
}

/// Tokens up to the first END, skipping PAD and START.
pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Result<Vec<String>, TextError> {
    let mut out = Vec::new();
    for &id in ids {
        match id {
            END => break,
            PAD | START => continue,
            _ => out.push(vocab.token(id)?.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::QAPair;

    fn dataset(pairs: &[(&str, &str)]) -> QADataset {
        QADataset::from_pairs(
            pairs
                .iter()
                .map(|(q, a)| QAPair::from_text(q, a).unwrap())
                .collect(),
        )
    }

    #[test]
    fn vocab_enumeration() {
        let v = build_vocab(&dataset(&[("a b", "b c")]), 1).unwrap();
        assert_eq!(v.len(), 7);
        // b occurs twice, then a < c by code point
        assert_eq!(&v.tokens()[4..], ["b", "a", "c"]);
        let v = build_vocab(&dataset(&[("a b", "b c")]), 3).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn vocab_rejects_empty_dataset() {
        assert!(matches!(
            build_vocab(&QADataset::from_pairs(vec![]), 1),
            Err(TextError::Ingestion(_))
        ));
    }

    #[test]
    fn encode_layouts() {
        let v = Vocabulary::from_words(["মালদ্বীপ".to_string()]);
        let ids = encode(&["মালদ্বীপ"], &v, 10, true, true);
        assert_eq!(ids.len(), 12);
        assert_eq!(&ids[..3], &[START, 4, END]);
        assert!(ids[3..].iter().all(|&i| i == PAD));

        assert_eq!(encode::<&str>(&[], &v, 3, true, true), vec![START, END, PAD, PAD, PAD]);

        let long: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::from_words(long.iter().cloned());
        let (ids, stats) = encode_counted(&long, &v, 15, true, true);
        assert_eq!(ids.len(), 17);
        assert_eq!(&ids[1..16], &(4..19).collect::<Vec<_>>()[..]);
        assert_eq!(ids[16], END);
        assert_eq!(stats.truncated, 1);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::from_words(["x".to_string()]);
        let (ids, stats) = encode_counted(&["x", "y"], &v, 4, false, false);
        assert_eq!(ids, vec![4, UNK, PAD, PAD, PAD, PAD]);
        assert_eq!(stats.unknown, 1);
    }

    #[test]
    fn decode_cases() {
        let v = Vocabulary::from_words(["মালদ্বীপ".to_string()]);
        assert_eq!(decode_ids(&[START, 4, END, PAD], &v).unwrap(), ["মালদ্বীপ"]);
        assert!(decode_ids(&[START, END], &v).unwrap().is_empty());
        assert!(matches!(
            decode_ids(&[START, 99], &v),
            Err(TextError::Vocabulary { id: 99, size: 5 })
        ));
    }

    #[test]
    fn serde_round_trip_keeps_index() {
        let v = Vocabulary::from_words(["p".to_string(), "q".to_string()]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("q"), 5);
    }
}
