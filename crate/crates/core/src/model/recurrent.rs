//! Recurrent encoder–decoder baselines with optional Luong dot attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{scaled_dot_product_attention, Mask};
use super::{check_length, ModelError, ParamSet, Result, SeqBatch, Session};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// tanh vanilla cell
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(ModelError::Config(format!("unknown cell kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    /// Luong global attention with the dot score.
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub bidirectional_encoder: bool,
    #[serde(default)]
    pub bidirectional_decoder: bool,
    pub attention: AttentionKind,
    pub vocab_size: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub dropout: f64,
}

impl RecurrentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden_size == 0 || self.embedding_size == 0 || self.vocab_size == 0 {
            return fail("hidden, embedding and vocabulary sizes must be positive");
        }
        if self.max_encoder_len == 0 || self.max_decoder_len == 0 {
            return fail("maximum lengths must be positive");
        }
        if self.bidirectional_decoder {
            return fail("a bidirectional decoder cannot generate left to right");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout outside [0, 1)");
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (h, e, v) = (self.hidden_size, self.embedding_size, self.vocab_size);
        let k = self.cell.gates();
        let cell = e * k * h + h * k * h + k * h;
        let directions = if self.bidirectional_encoder { 2 } else { 1 };
        let bridges = if self.bidirectional_encoder {
            let n = if self.cell == CellKind::Lstm { 2 } else { 1 };
            n * (2 * h * h + h)
        } else {
            0
        };
        let out_in = if self.attention == AttentionKind::Dot { 2 * h } else { h };
        2 * v * e + (directions + 1) * cell + bridges + out_in * v + v
    }
}

/// Input, recurrent and bias parameters of one cell, all gates fused along
/// the last axis in the order given by the cell kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeights {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
}

/// Hidden state, plus cell memory for LSTM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub hidden: Var,
    pub memory: Option<Var>,
}

/// One recurrence step from a raw input `x_t` (`[batch × embedding]`).
pub fn cell_step<T: Scalar>(g: &mut Graph<T>, kind: CellKind, w: &CellWeights, x: Var, state: &CellState) -> Result<CellState> {
    let projected = g.matmul(x, w.input)?;
    cell_update(g, kind, w, projected, state)
}

/// Recurrence from a precomputed input projection `x_t · W_input`.
///
/// Gate layouts: rnn `[a]`; gru `[z, r, n]` with `h' = (1 − z)·h + z·n`;
/// lstm `[i, f, g, o]` with `c' = f·c + i·g`, `h' = o·tanh(c')`.
fn cell_update<T: Scalar>(g: &mut Graph<T>, kind: CellKind, w: &CellWeights, projected: Var, state: &CellState) -> Result<CellState> {
    let h = g.shape(state.hidden)[1];
    let recurrent = g.matmul(state.hidden, w.recurrent)?;
    match kind {
        CellKind::Rnn => {
            let pre = g.add(projected, recurrent)?;
            let pre = g.add(pre, w.bias)?;
            Ok(CellState {
                hidden: g.tanh(pre),
                memory: None,
            })
        }
        CellKind::Gru => {
            let xb = g.add(projected, w.bias)?;
            let x_zr = g.narrow(xb, 1, 0, 2 * h)?;
            let h_zr = g.narrow(recurrent, 1, 0, 2 * h)?;
            let zr = g.add(x_zr, h_zr)?;
            let zr = g.sigmoid(zr);
            let z = g.narrow(zr, 1, 0, h)?;
            let r = g.narrow(zr, 1, h, h)?;
            let x_n = g.narrow(xb, 1, 2 * h, h)?;
            let h_n = g.narrow(recurrent, 1, 2 * h, h)?;
            let gated = g.mul(r, h_n)?;
            let n = g.add(x_n, gated)?;
            let n = g.tanh(n);
            let keep = g.one_minus(z);
            let old = g.mul(keep, state.hidden)?;
            let new = g.mul(z, n)?;
            Ok(CellState {
                hidden: g.add(old, new)?,
                memory: None,
            })
        }
        CellKind::Lstm => {
            let memory = state
                .memory
                .ok_or_else(|| ModelError::Contract("LSTM step needs cell memory".into()))?;
            let pre = g.add(projected, recurrent)?;
            let pre = g.add(pre, w.bias)?;
            let ifo_in = [0, 1, 3].map(|k| g.narrow(pre, 1, k * h, h));
            let [i, f, o] = ifo_in.map(|v| v.map(|v| g.sigmoid(v)));
            let (i, f, o) = (i?, f?, o?);
            let cand = g.narrow(pre, 1, 2 * h, h)?;
            let cand = g.tanh(cand);
            let kept = g.mul(f, memory)?;
            let written = g.mul(i, cand)?;
            let c = g.add(kept, written)?;
            let tc = g.tanh(c);
            Ok(CellState {
                hidden: g.mul(o, tc)?,
                memory: Some(c),
            })
        }
    }
}

/// Luong global attention with the dot score over all encoder positions.
///
/// `hidden` is `[batch × H]`, `states` is `[batch × n × H]`; returns the
/// context `[batch × H]` and weights `[batch × n]`.
pub fn luong_dot_attention<T: Scalar>(g: &mut Graph<T>, hidden: Var, states: Var, src_valid: &[bool]) -> Result<(Var, Var)> {
    let sh = g.shape(states).to_vec();
    let (b, n, h) = (sh[0], sh[1], sh[2]);
    if src_valid.len() != b * n {
        return Err(ModelError::Contract(format!(
            "source mask of {} entries for states {sh:?}",
            src_valid.len()
        )));
    }
    if (0..b).any(|r| !src_valid[r * n..(r + 1) * n].iter().any(|&v| v)) {
        return Err(ModelError::Contract("attention over an all-padding source".into()));
    }
    let q = g.reshape(hidden, &[b, 1, h])?;
    // the dot score is unscaled: pre-multiply the query by √H to cancel the
    // 1/√d_k of the shared attention kernel
    let q = g.scale(q, T::lit(h as f64).sqrt());
    let mask = Mask::keys(src_valid, b, 1);
    let (ctx, weights) = scaled_dot_product_attention(g, q, states, states, Some(&mask))?;
    Ok((g.reshape(ctx, &[b, h])?, g.reshape(weights, &[b, n])?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct CellParams {
    input: usize,
    recurrent: usize,
    bias: usize,
}

impl CellParams {
    fn bind<T: Scalar>(&self, s: &Session<T>) -> CellWeights {
        CellWeights {
            input: s.param(self.input),
            recurrent: s.param(self.recurrent),
            bias: s.param(self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bridge {
    hidden: (usize, usize),
    memory: Option<(usize, usize)>,
}

/// Encoder summary handed to the decoder.
pub struct EncoderMemory {
    pub initial: CellState,
    /// `[batch × n × H]`, present when the decoder attends.
    pub states: Option<Var>,
    src_valid: Vec<bool>,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentSeq2Seq<T> {
    config: RecurrentConfig,
    params: ParamSet<T>,
    enc_embedding: usize,
    dec_embedding: usize,
    forward_cell: CellParams,
    backward_cell: Option<CellParams>,
    bridge: Option<Bridge>,
    decoder_cell: CellParams,
    out_w: usize,
    out_b: usize,
}

impl<T: Scalar> RecurrentSeq2Seq<T> {
    pub fn new(config: RecurrentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, e, v) = (config.hidden_size, config.embedding_size, config.vocab_size);
        let k = config.cell.gates();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let enc_embedding = params.uniform("encoder.embedding", &[v, e], e, &mut rng);
        let dec_embedding = params.uniform("decoder.embedding", &[v, e], e, &mut rng);
        let mut cell = |params: &mut ParamSet<T>, name: &str| CellParams {
            input: params.uniform(&format!("{name}.input"), &[e, k * h], e, &mut rng),
            recurrent: params.uniform(&format!("{name}.recurrent"), &[h, k * h], h, &mut rng),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[k * h])),
        };
        let forward_cell = cell(&mut params, "encoder.forward");
        let backward_cell = config
            .bidirectional_encoder
            .then(|| cell(&mut params, "encoder.backward"));
        let decoder_cell = cell(&mut params, "decoder.cell");
        let mut linear = |params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize| {
            (
                params.uniform(&format!("{name}.weight"), &[fan_in, fan_out], fan_in, &mut rng),
                params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            )
        };
        let bridge = config.bidirectional_encoder.then(|| Bridge {
            hidden: linear(&mut params, "bridge.hidden", 2 * h, h),
            memory: (config.cell == CellKind::Lstm).then(|| linear(&mut params, "bridge.memory", 2 * h, h)),
        });
        let out_in = if config.attention == AttentionKind::Dot { 2 * h } else { h };
        let (out_w, out_b) = linear(&mut params, "projection", out_in, v);
        Ok(RecurrentSeq2Seq {
            config,
            params,
            enc_embedding,
            dec_embedding,
            forward_cell,
            backward_cell,
            bridge,
            decoder_cell,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn zero_state(&self, s: &mut Session<T>, batch: usize) -> CellState {
        let h = self.config.hidden_size;
        let hidden = s.graph.constant(Tensor::zeros(&[batch, h]));
        let memory = (self.config.cell == CellKind::Lstm).then(|| s.graph.constant(Tensor::zeros(&[batch, h])));
        CellState { hidden, memory }
    }

    /// Embeds ids and projects them through a cell's input weights for all
    /// positions at once: `[batch × n × gates·H]`.
    fn project_inputs(&self, s: &mut Session<T>, table: usize, ids: &SeqBatch, cell: CellParams) -> Result<Var> {
        let (b, n) = (ids.batch(), ids.len());
        let x = s.graph.embedding(s.param(table), ids.ids())?;
        let x = s.dropout(x, self.config.dropout)?;
        let xw = s.graph.matmul(x, s.param(cell.input))?;
        let width = s.graph.shape(xw)[1];
        Ok(s.graph.reshape(xw, &[b, n, width])?)
    }

    fn step_input(s: &mut Session<T>, projected: Var, t: usize) -> Result<Var> {
        let sh = s.graph.shape(projected).to_vec();
        let x = s.graph.narrow(projected, 1, t, 1)?;
        Ok(s.graph.reshape(x, &[sh[0], sh[2]])?)
    }

    /// `prev + mask·(next − prev)`: padded positions carry the state through
    /// unchanged.
    fn masked(s: &mut Session<T>, next: Var, prev: Var, mask: Var) -> Result<Var> {
        let delta = s.graph.sub(next, prev)?;
        let delta = s.graph.mul(delta, mask)?;
        Ok(s.graph.add(prev, delta)?)
    }

    fn run_direction(
        &self,
        s: &mut Session<T>,
        src: &SeqBatch,
        cell: CellParams,
        reverse: bool,
    ) -> Result<(CellState, Vec<Var>)> {
        let (b, n, h) = (src.batch(), src.len(), self.config.hidden_size);
        let projected = self.project_inputs(s, self.enc_embedding, src, cell)?;
        let weights = cell.bind(s);
        let mut state = self.zero_state(s, b);
        let mut outputs = vec![state.hidden; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let x = Self::step_input(s, projected, t)?;
            let next = cell_update(&mut s.graph, self.config.cell, &weights, x, &state)?;
            let mask: Vec<T> = (0..b)
                .flat_map(|r| {
                    let v = if src.valid()[r * n + t] { T::one() } else { T::zero() };
                    std::iter::repeat(v).take(h)
                })
                .collect();
            let mask = s.graph.constant(Tensor::new(&[b, h], mask)?);
            state = CellState {
                hidden: Self::masked(s, next.hidden, state.hidden, mask)?,
                memory: match (next.memory, state.memory) {
                    (Some(nc), Some(pc)) => Some(Self::masked(s, nc, pc, mask)?),
                    _ => None,
                },
            };
            outputs[t] = state.hidden;
        }
        Ok((state, outputs))
    }

    fn stack_steps(s: &mut Session<T>, steps: &[Var]) -> Result<Var> {
        let mut rows = Vec::with_capacity(steps.len());
        for &v in steps {
            let sh = s.graph.shape(v).to_vec();
            rows.push(s.graph.reshape(v, &[sh[0], 1, sh[1]])?);
        }
        Ok(s.graph.concat(&rows, 1)?)
    }

    pub fn encode(&self, s: &mut Session<T>, src: &SeqBatch) -> Result<EncoderMemory> {
        check_length("question", src.len(), self.config.max_encoder_len)?;
        let (fwd_state, fwd_out) = self.run_direction(s, src, self.forward_cell, false)?;
        let attend = self.config.attention == AttentionKind::Dot;
        let (initial, per_step) = match (self.backward_cell, self.bridge) {
            (Some(bwd), Some(bridge)) => {
                let (bwd_state, bwd_out) = self.run_direction(s, src, bwd, true)?;
                let joined = s.graph.concat(&[fwd_state.hidden, bwd_state.hidden], 1)?;
                let hidden = s.linear(joined, bridge.hidden.0, bridge.hidden.1)?;
                let memory = match (bridge.memory, fwd_state.memory, bwd_state.memory) {
                    (Some((w, b)), Some(fc), Some(bc)) => {
                        let joined = s.graph.concat(&[fc, bc], 1)?;
                        Some(s.linear(joined, w, b)?)
                    }
                    _ => None,
                };
                let per_step = if attend {
                    let mut out = Vec::with_capacity(fwd_out.len());
                    for (f, b) in fwd_out.iter().zip(&bwd_out) {
                        let joined = s.graph.concat(&[*f, *b], 1)?;
                        out.push(s.linear(joined, bridge.hidden.0, bridge.hidden.1)?);
                    }
                    out
                } else {
                    Vec::new()
                };
                (CellState { hidden, memory }, per_step)
            }
            _ => (fwd_state, fwd_out),
        };
        let states = if attend {
            Some(Self::stack_steps(s, &per_step)?)
        } else {
            None
        };
        Ok(EncoderMemory {
            initial,
            states,
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
        let projected = self.project_inputs(s, self.dec_embedding, tgt, self.decoder_cell)?;
        let weights = self.decoder_cell.bind(s);
        let mut state = memory.initial;
        let mut outputs = Vec::with_capacity(tgt.len());
        for t in 0..tgt.len() {
            let x = Self::step_input(s, projected, t)?;
            state = cell_update(&mut s.graph, self.config.cell, &weights, x, &state)?;
            let out = match memory.states {
                Some(states) => {
                    let (ctx, w) = luong_dot_attention(&mut s.graph, state.hidden, states, &memory.src_valid)?;
                    let mask = Mask::keys(&memory.src_valid, tgt.batch(), 1);
                    s.record(format!("decoder.step{t}"), w, Some(&mask));
                    s.graph.concat(&[state.hidden, ctx], 1)?
                }
                None => state.hidden,
            };
            outputs.push(s.dropout(out, self.config.dropout)?);
        }
        let stacked = Self::stack_steps(s, &outputs)?;
        s.linear(stacked, self.out_w, self.out_b)
    }
}
