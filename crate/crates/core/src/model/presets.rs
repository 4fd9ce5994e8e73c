use super::{AttentionKind, CellKind, ModelConfig, RecurrentConfig, TransformerConfig};

/// Data-dependent extents every preset needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub vocab_size: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
}

impl DataDims {
    /// Input at most 15 tokens, output at most 10.
    pub fn with_vocab(vocab_size: usize) -> Self {
        DataDims {
            vocab_size,
            max_input_len: 15,
            max_output_len: 10,
        }
    }
}

/// Row names of the model comparison, in table order.
pub const COMPARISON_PRESETS: [&str; 6] = ["simple-rnn", "lstm", "gru", "bi-rnn", "seq2seq-attention", "transformer"];

const RECURRENT_HIDDEN: usize = 512;
const RECURRENT_EMBEDDING: usize = 256;
const RECURRENT_DROPOUT: f64 = 0.1;

fn recurrent(dims: DataDims, cell: CellKind, bidirectional: bool, attention: AttentionKind) -> ModelConfig {
    ModelConfig::Recurrent(RecurrentConfig {
        cell,
        hidden_size: RECURRENT_HIDDEN,
        embedding_size: RECURRENT_EMBEDDING,
        bidirectional_encoder: bidirectional,
        bidirectional_decoder: false,
        attention,
        vocab_size: dims.vocab_size,
        max_encoder_len: dims.max_input_len,
        max_decoder_len: dims.max_output_len,
        dropout: RECURRENT_DROPOUT,
    })
}

/// Every named preset: the six comparison rows plus `transformer-small`.
pub fn preset(name: &str, dims: DataDims) -> Option<ModelConfig> {
    use AttentionKind::{Dot, None as Plain};
    Some(match name {
        "simple-rnn" => recurrent(dims, CellKind::Rnn, false, Plain),
        "lstm" => recurrent(dims, CellKind::Lstm, false, Plain),
        "gru" => recurrent(dims, CellKind::Gru, false, Plain),
        "bi-rnn" => recurrent(dims, CellKind::Rnn, true, Plain),
        "seq2seq-attention" => recurrent(dims, CellKind::Lstm, false, Dot),
        "transformer" => ModelConfig::Transformer(TransformerConfig::base(
            dims.vocab_size,
            dims.max_input_len,
            dims.max_output_len,
        )),
        "transformer-small" => ModelConfig::Transformer(TransformerConfig::small(
            dims.vocab_size,
            dims.max_input_len,
            dims.max_output_len,
        )),
        _ => return None,
    })
}

pub fn preset_names() -> Vec<&'static str> {
    let mut names = COMPARISON_PRESETS.to_vec();
    names.push("transformer-small");
    names
}

pub fn comparison_presets(dims: DataDims) -> Vec<(&'static str, ModelConfig)> {
    COMPARISON_PRESETS
        .iter()
        .map(|&n| (n, preset(n, dims).expect("table preset")))
        .collect()
}
