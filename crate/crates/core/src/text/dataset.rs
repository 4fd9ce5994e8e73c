use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{decode_utf8, normalize, tokenize, TextError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QAPair {
    pub question: Vec<String>,
    pub answer: Vec<String>,
}

impl QAPair {
    /// Normalises and tokenises both sides; `None` when either side is empty.
    pub fn from_text(question: &str, answer: &str) -> Option<Self> {
        let question = tokenize(&normalize(question));
        let answer = tokenize(&normalize(answer));
        (!question.is_empty() && !answer.is_empty()).then_some(QAPair { question, answer })
    }
}

/// Counts behind the dataset properties table. Token rows are reported both
/// as occurrences and as distinct types.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub question_tokens: usize,
    pub question_types: usize,
    pub answer_tokens: usize,
    pub answer_types: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub total_pairs: usize,
}

impl DatasetStats {
    fn compute(pairs: &[QAPair]) -> Self {
        let mut q_types = HashSet::new();
        let mut a_types = HashSet::new();
        let mut stats = DatasetStats {
            total_pairs: pairs.len(),
            ..Default::default()
        };
        for p in pairs {
            stats.question_tokens += p.question.len();
            stats.answer_tokens += p.answer.len();
            stats.max_input_len = stats.max_input_len.max(p.question.len());
            stats.max_output_len = stats.max_output_len.max(p.answer.len());
            q_types.extend(p.question.iter());
            a_types.extend(p.answer.iter());
        }
        stats.question_types = q_types.len();
        stats.answer_types = a_types.len();
        stats
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20}{}", "Dataset properties", "Number")?;
        writeln!(
            f,
            "{:<20}{} ({} distinct)",
            "Question token", self.question_tokens, self.question_types
        )?;
        writeln!(
            f,
            "{:<20}{} ({} distinct)",
            "Answer token", self.answer_tokens, self.answer_types
        )?;
        writeln!(f, "{:<20}{}", "Max input length", self.max_input_len)?;
        writeln!(f, "{:<20}{}", "Max output length", self.max_output_len)?;
        write!(f, "{:<20}{}", "Total data", self.total_pairs)
    }
}

/// Ordered question/answer pairs. Statistics are always derived from the
/// pairs themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QADataset {
    pairs: Vec<QAPair>,
    stats: DatasetStats,
    rejected: usize,
}

impl QADataset {
    pub fn from_pairs(pairs: Vec<QAPair>) -> Self {
        let stats = DatasetStats::compute(&pairs);
        QADataset {
            pairs,
            stats,
            rejected: 0,
        }
    }

    pub fn pairs(&self) -> &[QAPair] {
        &self.pairs
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    /// Lines dropped at ingestion because a side was empty after normalisation.
    pub fn rejected(&self) -> usize {
        self.rejected
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// `question<TAB>answer[<TAB>ignored...]`, `#` comment lines.
    #[default]
    Tsv,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<QADataset, TextError> {
    let bytes = std::fs::read(path).map_err(|source| TextError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = decode_utf8(&bytes)?;
    match format {
        DatasetFormat::Tsv => parse_tsv(text),
    }
}

pub fn parse_tsv(text: &str) -> Result<QADataset, TextError> {
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(question), Some(answer)) = (cols.next(), cols.next()) else {
            return Err(TextError::Parse {
                line: n + 1,
                message: "expected question<TAB>answer".into(),
            });
        };
        match QAPair::from_text(question, answer) {
            Some(p) => pairs.push(p),
            None => rejected += 1,
        }
    }
    if pairs.is_empty() {
        return Err(TextError::Ingestion("dataset contains no usable pairs".into()));
    }
    let mut ds = QADataset::from_pairs(pairs);
    ds.rejected = rejected;
    Ok(ds)
}

/// Seeded shuffle followed by a prefix split of `round(n · train_fraction)`
/// training pairs. Both sides must end up non-empty.
pub fn split(dataset: &QADataset, train_fraction: f64, seed: u64) -> Result<(QADataset, QADataset), TextError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(TextError::Ingestion(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(TextError::Ingestion(format!(
            "split of {n} pairs at {train_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| QADataset::from_pairs(idx.iter().map(|&i| dataset.pairs[i].clone()).collect());
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}
