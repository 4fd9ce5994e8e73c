//! Post-norm encoder–decoder transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{causal_mask, scaled_dot_product_attention, Mask};
use super::{check_length, ModelError, ParamSet, Result, SeqBatch, Session};
use crate::tensor::{Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Per-stack overrides of the global width, head count and dropout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StackOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

/// Resolved dimensions of one stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackSpec {
    pub d_model: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub d_model: usize,
    /// Inner width of the position-wise feed-forward block.
    pub ffn_units: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Question tokens accepted, excluding START/END.
    pub max_encoder_len: usize,
    /// Answer tokens produced, excluding START/END.
    pub max_decoder_len: usize,
    #[serde(default)]
    pub encoder: StackOverride,
    #[serde(default)]
    pub decoder: StackOverride,
}

impl TransformerConfig {
    /// 2 layers, d_model 256, 512 FFN units, 8 heads, dropout 0.1.
    pub fn base(vocab_size: usize, max_encoder_len: usize, max_decoder_len: usize) -> Self {
        TransformerConfig {
            num_layers: 2,
            d_model: 256,
            ffn_units: 512,
            num_heads: 8,
            dropout: 0.1,
            vocab_size,
            max_encoder_len,
            max_decoder_len,
            encoder: StackOverride::default(),
            decoder: StackOverride::default(),
        }
    }

    /// Base globals with both stacks overridden to d_model 128, 4 heads,
    /// dropout 0.3.
    pub fn small(vocab_size: usize, max_encoder_len: usize, max_decoder_len: usize) -> Self {
        let stack = StackOverride {
            d_model: Some(128),
            num_heads: Some(4),
            dropout: Some(0.3),
        };
        TransformerConfig {
            encoder: stack.clone(),
            decoder: stack,
            ..Self::base(vocab_size, max_encoder_len, max_decoder_len)
        }
    }

    fn resolve(&self, o: &StackOverride) -> StackSpec {
        StackSpec {
            d_model: o.d_model.unwrap_or(self.d_model),
            num_heads: o.num_heads.unwrap_or(self.num_heads),
            dropout: o.dropout.unwrap_or(self.dropout),
        }
    }

    pub fn encoder_stack(&self) -> StackSpec {
        self.resolve(&self.encoder)
    }

    pub fn decoder_stack(&self) -> StackSpec {
        self.resolve(&self.decoder)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.ffn_units == 0 || self.vocab_size == 0 {
            return fail("layers, FFN units and vocabulary size must be positive".into());
        }
        if self.max_encoder_len == 0 || self.max_decoder_len == 0 {
            return fail("maximum lengths must be positive".into());
        }
        for (name, s) in [("encoder", self.encoder_stack()), ("decoder", self.decoder_stack())] {
            if s.d_model == 0 || s.num_heads == 0 || s.d_model % s.num_heads != 0 {
                return fail(format!(
                    "{name} d_model {} must be a positive multiple of num_heads {}",
                    s.d_model, s.num_heads
                ));
            }
            if s.d_model % 2 != 0 {
                return fail(format!("{name} d_model {} must be even for positional encoding", s.d_model));
            }
            if !(0.0..1.0).contains(&s.dropout) {
                return fail(format!("{name} dropout {} outside [0, 1)", s.dropout));
            }
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (e, d) = (self.encoder_stack().d_model, self.decoder_stack().d_model);
        let (v, f, l) = (self.vocab_size, self.ffn_units, self.num_layers);
        let attn = |q: usize, kv: usize| 2 * (q * q + q) + 2 * (kv * q + q);
        let ffn = |w: usize| w * f + f + f * w + w;
        let enc_layer = attn(e, e) + ffn(e) + 2 * 2 * e;
        let dec_layer = attn(d, d) + attn(d, e) + ffn(d) + 3 * 2 * d;
        v * e + v * d + l * (enc_layer + dec_layer) + d * v + v
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding<T: Scalar>(max_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model == 0 || d_model % 2 != 0 || max_len == 0 {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even d_model and positive length, got {max_len}×{d_model}"
        )));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Ok(Tensor::new(&[max_len, d_model], data)?)
}

#[derive(Debug, Clone, PartialEq)]
struct AttnParams {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct FfnParams {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormParams {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    attn: AttnParams,
    ffn: FfnParams,
    norm1: NormParams,
    norm2: NormParams,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    ffn: FfnParams,
    norm1: NormParams,
    norm2: NormParams,
    norm3: NormParams,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.params.uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, self.rng);
        let b = self.params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        (w, b)
    }

    fn attention(&mut self, name: &str, width: usize, kv_width: usize) -> AttnParams {
        let (wq, bq) = self.linear(&format!("{name}.query"), width, width);
        let (wk, bk) = self.linear(&format!("{name}.key"), kv_width, width);
        let (wv, bv) = self.linear(&format!("{name}.value"), kv_width, width);
        let (wo, bo) = self.linear(&format!("{name}.output"), width, width);
        AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, name: &str, width: usize, inner: usize) -> FfnParams {
        let (w1, b1) = self.linear(&format!("{name}.inner"), width, inner);
        let (w2, b2) = self.linear(&format!("{name}.outer"), inner, width);
        FfnParams { w1, b1, w2, b2 }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormParams {
        NormParams {
            gain: self.params.push(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }
}

/// Encoder output plus the source validity it was computed under.
pub struct EncoderMemory {
    pub output: Var,
    src_valid: Vec<bool>,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    config: TransformerConfig,
    params: ParamSet<T>,
    enc_embedding: usize,
    dec_embedding: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: usize,
    out_b: usize,
    enc_positions: Tensor<T>,
    dec_positions: Tensor<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (e, d) = (config.encoder_stack().d_model, config.decoder_stack().d_model);
        let (v, f) = (config.vocab_size, config.ffn_units);
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: &mut params,
            rng: &mut rng,
        };
        let enc_embedding = b.params.uniform("encoder.embedding", &[v, e], e, b.rng);
        let dec_embedding = b.params.uniform("decoder.embedding", &[v, d], d, b.rng);
        let encoder = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    attn: b.attention(&format!("{p}.self_attention"), e, e),
                    norm1: b.norm(&format!("{p}.norm1"), e),
                    ffn: b.ffn(&format!("{p}.ffn"), e, f),
                    norm2: b.norm(&format!("{p}.norm2"), e),
                }
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: b.attention(&format!("{p}.self_attention"), d, d),
                    norm1: b.norm(&format!("{p}.norm1"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attention"), d, e),
                    norm2: b.norm(&format!("{p}.norm2"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, f),
                    norm3: b.norm(&format!("{p}.norm3"), d),
                }
            })
            .collect();
        let (out_w, out_b) = b.linear("projection", d, v);
        Ok(Transformer {
            enc_positions: positional_encoding(config.max_encoder_len + 2, e)?,
            dec_positions: positional_encoding(config.max_decoder_len + 2, d)?,
            config,
            params,
            enc_embedding,
            dec_embedding,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Token embedding scaled by √d_model plus the positional table.
    fn embed(&self, s: &mut Session<T>, table: usize, positions: &Tensor<T>, ids: &SeqBatch, dropout: f64) -> Result<Var> {
        let (b, n) = (ids.batch(), ids.len());
        let width = positions.shape()[1];
        let x = s.graph.embedding(s.param(table), ids.ids())?;
        let x = s.graph.reshape(x, &[b, n, width])?;
        let x = s.graph.scale(x, T::lit(width as f64).sqrt());
        let pe = s.graph.constant(crate::tensor::narrow(positions, 0, 0, n)?);
        let x = s.graph.add(x, pe)?;
        s.dropout(x, dropout)
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        s: &mut Session<T>,
        name: &str,
        xq: Var,
        xkv: Var,
        p: &AttnParams,
        heads: usize,
        mask: &Mask,
    ) -> Result<Var> {
        let (b, nq, width) = {
            let sh = s.graph.shape(xq);
            (sh[0], sh[1], sh[2])
        };
        let nk = s.graph.shape(xkv)[1];
        let dk = width / heads;
        let q = s.linear(xq, p.wq, p.bq)?;
        let k = s.linear(xkv, p.wk, p.bk)?;
        let v = s.linear(xkv, p.wv, p.bv)?;
        let split = |s: &mut Session<T>, x: Var, n: usize| -> Result<Var> {
            let x = s.graph.reshape(x, &[b, n, heads, dk])?;
            let x = s.graph.permute(x, &[0, 2, 1, 3])?;
            Ok(s.graph.reshape(x, &[b * heads, n, dk])?)
        };
        let (q, k, v) = (split(s, q, nq)?, split(s, k, nk)?, split(s, v, nk)?);
        let (out, weights) = scaled_dot_product_attention(&mut s.graph, q, k, v, Some(mask))?;
        s.record(name, weights, Some(mask));
        let out = s.graph.reshape(out, &[b, heads, nq, dk])?;
        let out = s.graph.permute(out, &[0, 2, 1, 3])?;
        let out = s.graph.reshape(out, &[b, nq, width])?;
        s.linear(out, p.wo, p.bo)
    }

    fn feed_forward(&self, s: &mut Session<T>, x: Var, p: &FfnParams) -> Result<Var> {
        let h = s.linear(x, p.w1, p.b1)?;
        let h = s.graph.relu(h);
        s.linear(h, p.w2, p.b2)
    }

    /// `layer_norm(x + dropout(sublayer))`
    fn residual(&self, s: &mut Session<T>, x: Var, sub: Var, norm: NormParams, dropout: f64) -> Result<Var> {
        let sub = s.dropout(sub, dropout)?;
        let sum = s.graph.add(x, sub)?;
        Ok(s.graph.layer_norm(sum, s.param(norm.gain), s.param(norm.bias), T::lit(LN_EPS))?)
    }

    pub fn encode(&self, s: &mut Session<T>, src: &SeqBatch) -> Result<EncoderMemory> {
        check_length("question", src.len(), self.config.max_encoder_len)?;
        let spec = self.config.encoder_stack();
        let mut x = self.embed(s, self.enc_embedding, &self.enc_positions, src, spec.dropout)?;
        let mask = Mask::keys(src.valid(), src.batch(), src.len());
        for (i, layer) in self.encoder.iter().enumerate() {
            let a = self.multi_head(s, &format!("encoder{i}.self"), x, x, &layer.attn, spec.num_heads, &mask)?;
            x = self.residual(s, x, a, layer.norm1, spec.dropout)?;
            let f = self.feed_forward(s, x, &layer.ffn)?;
            x = self.residual(s, x, f, layer.norm2, spec.dropout)?;
        }
        Ok(EncoderMemory {
            output: x,
            src_valid: src.valid().to_vec(),
            batch: src.batch(),
        })
    }

    pub fn decode(&self, s: &mut Session<T>, memory: &EncoderMemory, tgt: &SeqBatch) -> Result<Var> {
        check_length("answer", tgt.len(), self.config.max_decoder_len)?;
        if tgt.batch() != memory.batch {
            return Err(ModelError::Contract(format!(
                "decoder batch {} does not match encoder batch {}",
                tgt.batch(),
                memory.batch
            )));
        }
        let spec = self.config.decoder_stack();
        let (b, n) = (tgt.batch(), tgt.len());
        let self_mask = causal_mask(n).and(&Mask::keys(tgt.valid(), b, n))?;
        let cross_mask = Mask::keys(&memory.src_valid, b, n);
        let mut y = self.embed(s, self.dec_embedding, &self.dec_positions, tgt, spec.dropout)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            let a = self.multi_head(s, &format!("decoder{i}.self"), y, y, &layer.self_attn, spec.num_heads, &self_mask)?;
            y = self.residual(s, y, a, layer.norm1, spec.dropout)?;
            let c = self.multi_head(
                s,
                &format!("decoder{i}.cross"),
                y,
                memory.output,
                &layer.cross_attn,
                spec.num_heads,
                &cross_mask,
            )?;
            y = self.residual(s, y, c, layer.norm2, spec.dropout)?;
            let f = self.feed_forward(s, y, &layer.ffn)?;
            y = self.residual(s, y, f, layer.norm3, spec.dropout)?;
        }
        s.linear(y, self.out_w, self.out_b)
    }
}
