//! Encoder–decoder models over token-id batches: the transformer and the
//! recurrent baselines, sharing one parameter container and one forward
//! session type.

mod attention;
mod presets;
mod recurrent;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};
use crate::text::PAD;

pub use attention::{causal_mask, scaled_dot_product_attention, Mask};
pub use presets::{preset, preset_names, comparison_presets, DataDims, COMPARISON_PRESETS};
pub use recurrent::{
    cell_step, luong_dot_attention, AttentionKind, CellKind, CellState, CellWeights, RecurrentConfig,
    RecurrentSeq2Seq,
};
pub use transformer::{positional_encoding, StackOverride, StackSpec, Transformer, TransformerConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Named, ordered parameter tensors. Order is fixed at construction and is
/// the order used by the optimizer and the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes against `self`.
    pub fn assign(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameters, got {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(ModelError::Contract(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub(crate) fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.push(name, Tensor::uniform(shape, bound, rng))
    }
}

/// A batch of equal-length id rows plus a validity flag per position.
///
/// Validity defaults to `id != PAD` but is stored separately, so a probe can
/// alter the ids at padded positions without un-padding them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    ids: Vec<usize>,
    valid: Vec<bool>,
    batch: usize,
    len: usize,
}

impl SeqBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let len = rows.first().map(Vec::len).unwrap_or(0);
        if len == 0 || rows.iter().any(|r| r.len() != len) {
            return Err(ModelError::Contract("batch rows must be non-empty and of equal length".into()));
        }
        let ids: Vec<usize> = rows.concat();
        let valid = ids.iter().map(|&i| i != PAD).collect();
        Ok(SeqBatch {
            ids,
            valid,
            batch: rows.len(),
            len,
        })
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> Self {
        let keep = (0..self.len)
            .rev()
            .find(|&c| (0..self.batch).any(|b| self.valid[b * self.len + c]))
            .map_or(1, |c| c + 1);
        self.narrow(keep)
    }

    /// The first `len` positions of every row.
    pub fn narrow(&self, len: usize) -> Self {
        let len = len.min(self.len);
        let pick = |v: &[usize]| (0..self.batch).flat_map(|b| v[b * self.len..b * self.len + len].to_vec()).collect();
        let ids = pick(&self.ids);
        let valid = (0..self.batch)
            .flat_map(|b| self.valid[b * self.len..b * self.len + len].to_vec())
            .collect();
        SeqBatch {
            ids,
            valid,
            batch: self.batch,
            len,
        }
    }

    pub fn with_ids(&self, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), self.ids.len());
        SeqBatch { ids, ..self.clone() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Attention weights captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub name: String,
    /// `[batch·heads × queries × keys]`
    pub weights: Var,
    pub mask: Option<Mask>,
}

/// One forward pass: a fresh tape, the model parameters bound onto it, and
/// the dropout stream when training.
pub struct Session<T: Scalar> {
    pub graph: Graph<T>,
    params: Vec<Var>,
    rng: Option<ChaCha8Rng>,
    record: bool,
    attention: Vec<AttentionRecord>,
}

impl<T: Scalar> Session<T> {
    /// Parameters are trainable leaves and dropout is active.
    pub fn train(params: &ParamSet<T>, seed: u64) -> Self {
        let mut graph = Graph::new();
        let params = params.tensors().iter().map(|t| graph.leaf(t.clone())).collect();
        Session {
            graph,
            params,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            record: false,
            attention: Vec::new(),
        }
    }

    /// Parameters are trainable leaves, dropout is off. Used for gradient checks.
    pub fn differentiable(params: &ParamSet<T>) -> Self {
        let mut s = Self::train(params, 0);
        s.rng = None;
        s
    }

    /// Parameters are constants and dropout is off.
    pub fn eval(params: &ParamSet<T>) -> Self {
        let mut graph = Graph::new();
        let params = params.tensors().iter().map(|t| graph.constant(t.clone())).collect();
        Session {
            graph,
            params,
            rng: None,
            record: false,
            attention: Vec::new(),
        }
    }

    pub fn recording_attention(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn param(&self, index: usize) -> Var {
        self.params[index]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn attention(&self) -> &[AttentionRecord] {
        &self.attention
    }

    pub(crate) fn record(&mut self, name: impl Into<String>, weights: Var, mask: Option<&Mask>) {
        if self.record {
            self.attention.push(AttentionRecord {
                name: name.into(),
                weights,
                mask: mask.cloned(),
            });
        }
    }

    pub(crate) fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => Ok(self.graph.dropout(x, rate, rng)?),
            None => Ok(x),
        }
    }

    /// `x · W + b` over the last axis of `x`.
    pub(crate) fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let shape = self.graph.shape(x).to_vec();
        let width = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / width;
        let x2 = self.graph.reshape(x, &[rows, width])?;
        let y = self.graph.matmul(x2, self.params[w])?;
        let y = self.graph.add(y, self.params[b])?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.graph.shape(y)[1];
        Ok(self.graph.reshape(y, &out_shape)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Recurrent(RecurrentConfig),
}

impl ModelConfig {
    pub fn family(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Recurrent(_) => "recurrent",
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Recurrent(c) => c.vocab_size,
        }
    }

    /// Token maxima excluding START/END.
    pub fn max_lengths(&self) -> (usize, usize) {
        match self {
            ModelConfig::Transformer(c) => (c.max_encoder_len, c.max_decoder_len),
            ModelConfig::Recurrent(c) => (c.max_encoder_len, c.max_decoder_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Recurrent(c) => c.validate(),
        }
    }

    pub fn summary(&self) -> String {
        match self {
            ModelConfig::Transformer(c) => {
                let (e, d) = (c.encoder_stack(), c.decoder_stack());
                format!(
                    "transformer layers={} d_model={}/{} heads={}/{} ffn={} dropout={}/{} vocab={}",
                    c.num_layers, e.d_model, d.d_model, e.num_heads, d.num_heads, c.ffn_units, e.dropout, d.dropout, c.vocab_size
                )
            }
            ModelConfig::Recurrent(c) => format!(
                "recurrent cell={:?} hidden={} embedding={} bidirectional={} attention={:?} vocab={}",
                c.cell, c.hidden_size, c.embedding_size, c.bidirectional_encoder, c.attention, c.vocab_size
            ),
        }
    }
}

/// Encoder output consumed by repeated decoder calls.
pub enum Memory {
    Transformer(transformer::EncoderMemory),
    Recurrent(recurrent::EncoderMemory),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Transformer(Transformer<T>),
    Recurrent(RecurrentSeq2Seq<T>),
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised parameters, deterministic in `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Transformer(c) => Model::Transformer(Transformer::new(c.clone(), seed)?),
            ModelConfig::Recurrent(c) => Model::Recurrent(RecurrentSeq2Seq::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Transformer(m) => ModelConfig::Transformer(m.config().clone()),
            Model::Recurrent(m) => ModelConfig::Recurrent(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            Model::Transformer(m) => m.params(),
            Model::Recurrent(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Model::Transformer(m) => m.params_mut(),
            Model::Recurrent(m) => m.params_mut(),
        }
    }

    pub fn encode(&self, s: &mut Session<T>, src: &SeqBatch) -> Result<Memory> {
        Ok(match self {
            Model::Transformer(m) => Memory::Transformer(m.encode(s, src)?),
            Model::Recurrent(m) => Memory::Recurrent(m.encode(s, src)?),
        })
    }

    /// Teacher-forced decoder pass: logits `[batch × tgt.len() × vocab]`.
    pub fn decode(&self, s: &mut Session<T>, memory: &Memory, tgt: &SeqBatch) -> Result<Var> {
        match (self, memory) {
            (Model::Transformer(m), Memory::Transformer(mem)) => m.decode(s, mem, tgt),
            (Model::Recurrent(m), Memory::Recurrent(mem)) => m.decode(s, mem, tgt),
            _ => Err(ModelError::Contract("encoder memory from a different model family".into())),
        }
    }

    pub fn forward(&self, s: &mut Session<T>, src: &SeqBatch, tgt: &SeqBatch) -> Result<Var> {
        let memory = self.encode(s, src)?;
        self.decode(s, &memory, tgt)
    }
}

pub(crate) fn check_length(what: &str, len: usize, max_tokens: usize) -> Result<()> {
    if len > max_tokens + 2 {
        return Err(ModelError::Contract(format!(
            "{what} length {len} exceeds the configured limit of {} positions ({max_tokens} tokens + START/END)",
            max_tokens + 2
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimming_drops_all_pad_columns() {
        let b = SeqBatch::from_rows(&[vec![1, 5, 2, 0, 0], vec![1, 2, 0, 0, 0]]).unwrap();
        let t = b.trimmed();
        assert_eq!(t.len(), 3);
        assert_eq!(t.ids(), &[1, 5, 2, 1, 2, 0]);
        assert_eq!(t.valid(), &[true, true, true, true, true, false]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(SeqBatch::from_rows(&[vec![1, 2], vec![1]]).is_err());
        assert!(SeqBatch::from_rows(&[]).is_err());
    }

    #[test]
    fn param_assign_checks_shapes() {
        let mut p = ParamSet::<f64>::default();
        p.push("w", Tensor::zeros(&[2, 2]));
        assert!(p.assign(vec![("w".into(), Tensor::zeros(&[2, 3]))]).is_err());
        assert!(p.assign(vec![("v".into(), Tensor::zeros(&[2, 2]))]).is_err());
        p.assign(vec![("w".into(), Tensor::ones(&[2, 2]))]).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0; 4]);
        assert_eq!(p.count(), 4);
    }
}
