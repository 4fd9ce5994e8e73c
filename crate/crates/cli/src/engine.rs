//! The one inference path shared by the terminal loop and the HTTP service.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use seqchat_core::decode::{greedy_decode, Decoded};
use seqchat_core::model::ModelConfig;
use seqchat_core::tensor::{DType, Scalar};
use seqchat_core::train::{peek_dtype, Checkpoint};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub question: String,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub answer: String,
    pub token_ids: Vec<usize>,
    pub latency_ms: f64,
    /// `family:checksum-prefix` of the served parameters.
    pub model: String,
}

enum Loaded {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn decode_with<T: Scalar>(c: &Checkpoint<T>, question: &str, max_steps: Option<usize>) -> Result<Decoded> {
    Ok(greedy_decode(&c.model, &c.vocab, question, max_steps)?)
}

/// A loaded checkpoint, immutable after construction.
pub struct Engine {
    loaded: Loaded,
    tag: String,
    config: ModelConfig,
    vocab_size: usize,
    dtype: DType,
}

impl Engine {
    pub fn load(path: &Path) -> Result<Self> {
        let ctx = || format!("loading checkpoint {}", path.display());
        let dtype = peek_dtype(path).with_context(ctx)?;
        let loaded = match dtype {
            DType::F32 => Loaded::F32(Checkpoint::load(path).with_context(ctx)?),
            DType::F64 => Loaded::F64(Checkpoint::load(path).with_context(ctx)?),
        };
        let (tag, config, vocab_size) = match &loaded {
            Loaded::F32(c) => (c.model_tag(), c.model.config(), c.vocab.len()),
            Loaded::F64(c) => (c.model_tag(), c.model.config(), c.vocab.len()),
        };
        Ok(Engine {
            loaded,
            tag,
            config,
            vocab_size,
            dtype,
        })
    }

    pub fn answer(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let start = Instant::now();
        let out = match &self.loaded {
            Loaded::F32(c) => decode_with(c, &request.question, request.max_steps),
            Loaded::F64(c) => decode_with(c, &request.question, request.max_steps),
        }?;
        Ok(ChatResponse {
            answer: out.answer,
            token_ids: out.ids,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
            model: self.tag.clone(),
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }
}
