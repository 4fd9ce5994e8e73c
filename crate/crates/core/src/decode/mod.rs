//! Greedy decoding and BLEU evaluation.

mod bleu;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError, SeqBatch, Session};
use crate::tensor::Scalar;
use crate::text::{decode_ids, detokenize, encode, normalize, tokenize, QADataset, TextError, Vocabulary, END, START};
use crate::train::{Trainer, TrainConfig, TrainError};

pub use bleu::{bleu, BleuReport};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub answer: String,
    pub tokens: Vec<String>,
    /// One id per decoder step, END included when produced.
    pub ids: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Default and upper bound on decoder steps: the positions the decoder can
/// address.
pub fn max_decode_steps(model_max_output: usize) -> usize {
    model_max_output + 2
}

/// Encodes the question with START/END, then extends a START-only decoder
/// prefix by its argmax token until END or `max_steps`.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    question: &str,
    max_steps: Option<usize>,
) -> Result<Decoded> {
    let (max_in, max_out) = model.config().max_lengths();
    let limit = max_decode_steps(max_out);
    let steps = max_steps.unwrap_or(limit).min(limit);
    let tokens = tokenize(&normalize(question));
    let src = SeqBatch::from_rows(&[encode(&tokens, vocab, max_in, true, true)])?.trimmed();
    let mut session = Session::eval(model.params());
    let memory = model.encode(&mut session, &src)?;
    let mut prefix = vec![START];
    let mut ids = Vec::new();
    for _ in 0..steps {
        let tgt = SeqBatch::from_rows(&[prefix.clone()])?;
        let logits = model.decode(&mut session, &memory, &tgt)?;
        let value = session.graph.value(logits);
        let v = *value.shape().last().unwrap();
        let next = argmax(&value.data()[value.numel() - v..]);
        ids.push(next);
        if next == END {
            break;
        }
        prefix.push(next);
    }
    let tokens = decode_ids(&ids, vocab)?;
    Ok(Decoded {
        answer: detokenize(&tokens),
        tokens,
        ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub question: String,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bleu: BleuReport,
    /// Fraction of hypotheses whose tokens equal the reference tokens.
    pub exact_match: f64,
    pub transcripts: Vec<Transcript>,
}

/// Greedy-decodes every question and scores against its single reference.
pub fn evaluate<T: Scalar>(model: &Model<T>, vocab: &Vocabulary, test: &QADataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(DecodeError::Contract("evaluation set is empty".into()));
    }
    let mut hyps = Vec::with_capacity(test.len());
    let mut refs = Vec::with_capacity(test.len());
    let mut transcripts = Vec::with_capacity(test.len());
    for pair in test.pairs() {
        let question = detokenize(&pair.question);
        let out = greedy_decode(model, vocab, &question, None)?;
        transcripts.push(Transcript {
            question,
            reference: detokenize(&pair.answer),
            hypothesis: out.answer,
        });
        hyps.push(out.tokens);
        refs.push(pair.answer.clone());
    }
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    Ok(Evaluation {
        bleu: bleu(&hyps, &refs, BLEU_ORDER)?,
        exact_match: exact as f64 / test.len() as f64,
        transcripts,
    })
}

/// One named row of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub exact_match: f64,
}

impl ReportRow {
    pub fn new(name: impl Into<String>, eval: &Evaluation) -> Self {
        ReportRow {
            name: name.into(),
            bleu: eval.bleu.score,
            precisions: eval.bleu.precisions.clone(),
            brevity_penalty: eval.bleu.brevity_penalty,
            hyp_len: eval.bleu.hyp_len,
            ref_len: eval.bleu.ref_len,
            exact_match: eval.exact_match,
        }
    }
}

/// Rows rendered as a fixed-width table.
pub struct ReportTable<'a>(pub &'a [ReportRow]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20} {:>7} {:>6} {:>6} {:>6} {:>6} {:>5} {:>9} {:>6}",
            "model", "BLEU", "p1", "p2", "p3", "p4", "BP", "hyp/ref", "exact"
        )?;
        for r in self.0 {
            let p = |i: usize| r.precisions.get(i).copied().unwrap_or(f64::NAN);
            writeln!(
                f,
                "{:<20} {:>7.2} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>5.3} {:>9} {:>5.1}%",
                r.name,
                r.bleu,
                p(0),
                p(1),
                p(2),
                p(3),
                r.brevity_penalty,
                format!("{}/{}", r.hyp_len, r.ref_len),
                100.0 * r.exact_match
            )?;
        }
        Ok(())
    }
}

/// Trains every configuration under one `TrainConfig` and evaluates each on
/// `test`, producing one row per model in input order.
pub fn compare<T: Scalar>(
    presets: &[(String, crate::model::ModelConfig)],
    vocab: &Vocabulary,
    train: &QADataset,
    test: &QADataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&str, &crate::train::StepRecord),
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(presets.len());
    for (name, model_config) in presets {
        let model = Model::<T>::new(model_config, config.seed)?;
        let mut trainer = Trainer::new(model, vocab.clone(), train, config.clone())?;
        trainer.run(|r| progress(name, r))?;
        let (model, vocab) = trainer.into_model();
        rows.push(ReportRow::new(name.clone(), &evaluate(&model, &vocab, test)?));
    }
    Ok(rows)
}
