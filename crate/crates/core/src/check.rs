//! Numerical diagnostics shared by the test suites: finite-difference
//! gradient checks, causality and padding probes, attention audits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelError, SeqBatch, Session};
use crate::tensor::{Scalar, Tensor};
use crate::text::PAD;

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_value<T: Scalar>(model: &Model<T>, src: &SeqBatch, dec: &SeqBatch, tgt: &[usize]) -> Result<f64> {
    let mut s = Session::eval(model.params());
    let logits = model.forward(&mut s, src, dec)?;
    let loss = s.graph.cross_entropy(logits, tgt, PAD)?;
    Ok(s.graph.value(loss).item().as_f64())
}

/// Compares backprop gradients of the teacher-forced loss with central
/// differences of step `h` at `count` coordinates. Coordinates are drawn
/// round-robin over parameter tensors, preferring entries whose analytic
/// gradient is non-zero.
pub fn gradient_check<T: Scalar>(
    model: &Model<T>,
    src: &SeqBatch,
    dec: &SeqBatch,
    tgt: &[usize],
    count: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<CoordinateCheck>> {
    let mut s = Session::differentiable(model.params());
    let logits = model.forward(&mut s, src, dec)?;
    let loss = s.graph.cross_entropy(logits, tgt, PAD)?;
    s.graph.backward(loss)?;
    let grads: Vec<Tensor<T>> = model
        .params()
        .tensors()
        .iter()
        .zip(s.params())
        .map(|(p, &v)| s.graph.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(s);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..grads.len()).collect();
    order.shuffle(&mut rng);
    let mut picks = Vec::with_capacity(count);
    for k in 0..count {
        let p = order[k % order.len()];
        let g = grads[p].data();
        let live: Vec<usize> = (0..g.len()).filter(|&i| g[i] != T::zero()).collect();
        let index = if live.is_empty() {
            rng.gen_range(0..g.len())
        } else {
            live[rng.gen_range(0..live.len())]
        };
        picks.push((p, index));
    }

    let mut probe = model.clone();
    let mut out = Vec::with_capacity(count);
    for (p, index) in picks {
        let original = probe.params().tensors()[p].data()[index];
        let mut at = |value: T| -> Result<f64> {
            probe.params_mut().tensors_mut()[p].data_mut()[index] = value;
            loss_value(&probe, src, dec, tgt)
        };
        let plus = at(original + T::lit(h))?;
        let minus = at(original - T::lit(h))?;
        at(original)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[p].data()[index].as_f64();
        out.push(CoordinateCheck {
            param: model.params().names()[p].clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

fn logits<T: Scalar>(model: &Model<T>, src: &SeqBatch, dec: &SeqBatch) -> Result<Tensor<T>> {
    let mut s = Session::eval(model.params());
    let out = model.forward(&mut s, src, dec)?;
    Ok(s.graph.value(out).clone())
}

/// Largest change in decoder logits at positions `≤ t` after replacing every
/// decoder input token after `t` with random ids.
pub fn causality_probe<T: Scalar>(model: &Model<T>, src: &SeqBatch, dec: &SeqBatch, t: usize, seed: u64) -> Result<f64> {
    let base = logits(model, src, dec)?;
    let vocab = model.config().vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = dec.ids().to_vec();
    for b in 0..dec.batch() {
        for j in t + 1..dec.len() {
            ids[b * dec.len() + j] = rng.gen_range(1..vocab);
        }
    }
    let probed = logits(model, src, &dec.with_ids(ids))?;
    let v = vocab;
    let mut worst = 0.0f64;
    for b in 0..dec.batch() {
        for j in 0..=t.min(dec.len() - 1) {
            let at = (b * dec.len() + j) * v;
            for k in at..at + v {
                worst = worst.max((base.data()[k] - probed.data()[k]).abs().as_f64());
            }
        }
    }
    Ok(worst)
}

/// Largest change in any logit after replacing the ids at padded source
/// positions; the validity mask is kept.
pub fn padding_probe<T: Scalar>(model: &Model<T>, src: &SeqBatch, dec: &SeqBatch, seed: u64) -> Result<f64> {
    let base = logits(model, src, dec)?;
    let vocab = model.config().vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = src
        .ids()
        .iter()
        .zip(src.valid())
        .map(|(&id, &ok)| if ok { id } else { rng.gen_range(1..vocab) })
        .collect();
    let probed = logits(model, &src.with_ids(ids), dec)?;
    Ok(base.max_abs_diff(&probed))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttentionAudit {
    pub records: usize,
    pub rows: usize,
    /// Largest `|Σ row − 1|`.
    pub max_row_error: f64,
    /// Largest weight on a blocked position.
    pub max_masked_weight: f64,
}

/// Runs a recording forward pass and audits every attention matrix.
pub fn attention_audit<T: Scalar>(model: &Model<T>, src: &SeqBatch, dec: &SeqBatch) -> Result<AttentionAudit> {
    let mut s = Session::eval(model.params()).recording_attention();
    model.forward(&mut s, src, dec)?;
    let mut audit = AttentionAudit::default();
    for rec in s.attention() {
        let w = s.graph.value(rec.weights);
        let cols = *w.shape().last().unwrap();
        let rows_total = w.numel() / cols;
        audit.records += 1;
        audit.rows += rows_total;
        let (mb, mrows, _) = rec.mask.as_ref().map_or((1, rows_total, cols), |m| m.dims());
        let slices = rows_total / mrows;
        let group = if mb == 1 { slices } else { slices / mb };
        for r in 0..rows_total {
            let row = &w.data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
            audit.max_row_error = audit.max_row_error.max((sum - 1.0).abs());
            if let Some(mask) = &rec.mask {
                let (slice, i) = (r / mrows, r % mrows);
                for (j, x) in row.iter().enumerate() {
                    if !mask.allowed(slice / group, i, j) {
                        audit.max_masked_weight = audit.max_masked_weight.max(x.as_f64());
                    }
                }
            }
        }
    }
    Ok(audit)
}
