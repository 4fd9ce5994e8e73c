use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::{ModelError, Result};

/// Additive bias standing in for −∞ on blocked positions. After the softmax
/// max-shift its exponential underflows to exactly zero.
const BLOCKED: f64 = -1e9;

/// Boolean attention mask of shape `[batch × rows × cols]`, `true` = allowed.
/// A batch extent of 1 broadcasts over every batch entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, rows: usize, cols: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), batch * rows * cols, "mask extent");
        Mask {
            batch,
            rows,
            cols,
            allowed,
        }
    }

    /// Key-padding mask: query rows may attend to key `j` of batch `b` iff
    /// `key_valid[b * cols + j]`.
    pub fn keys(key_valid: &[bool], batch: usize, rows: usize) -> Self {
        let cols = key_valid.len() / batch;
        let mut allowed = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for _ in 0..rows {
                allowed.extend_from_slice(&key_valid[b * cols..(b + 1) * cols]);
            }
        }
        Mask::new(batch, rows, cols, allowed)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.batch, self.rows, self.cols)
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[(b * self.rows + i) * self.cols + j]
    }

    /// Elementwise conjunction; a batch-1 side broadcasts.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.rows != other.rows
            || self.cols != other.cols
            || (self.batch != other.batch && self.batch != 1 && other.batch != 1)
        {
            return Err(ModelError::Contract(format!(
                "cannot combine masks {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let batch = self.batch.max(other.batch);
        let mut allowed = Vec::with_capacity(batch * self.rows * self.cols);
        for b in 0..batch {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    allowed.push(self.allowed(b, i, j) && other.allowed(b, i, j));
                }
            }
        }
        Ok(Mask::new(batch, self.rows, self.cols, allowed))
    }

    pub fn blocked_count(&self) -> usize {
        self.allowed.iter().filter(|a| !**a).count()
    }

    /// Additive bias expanded to `[total × rows × cols]`, where consecutive
    /// groups of `total / batch` entries share one mask batch entry.
    pub fn bias<T: Scalar>(&self, total: usize) -> Result<Tensor<T>> {
        if self.batch != 1 && total % self.batch != 0 {
            return Err(ModelError::Contract(format!(
                "mask batch {} does not divide attention batch {total}",
                self.batch
            )));
        }
        let group = if self.batch == 1 { total } else { total / self.batch };
        let blocked = T::lit(BLOCKED);
        let mut data = Vec::with_capacity(total * self.rows * self.cols);
        for t in 0..total {
            let b = t / group;
            for i in 0..self.rows {
                for j in 0..self.cols {
                    data.push(if self.allowed(b, i, j) { T::zero() } else { blocked });
                }
            }
        }
        Ok(Tensor::new(&[total, self.rows, self.cols], data)?)
    }
}

/// Decoder self-attention mask: position `i` sees `j` iff `j <= i`.
pub fn causal_mask(n: usize) -> Mask {
    assert!(n >= 1, "causal mask needs at least one position");
    let allowed = (0..n * n).map(|k| k % n <= k / n).collect();
    Mask::new(1, n, n, allowed)
}

/// `softmax(Q·Kᵀ/√d_k + bias)·V` over `[B × n × d]` operands.
/// Returns the attended values and the weight matrix.
pub fn scaled_dot_product_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().unwrap();
    let scores = g.bmm(q, k, true)?;
    let mut scores = g.scale(scores, T::one() / T::lit(dk as f64).sqrt());
    if let Some(mask) = mask {
        let shape = g.shape(scores).to_vec();
        if (mask.rows, mask.cols) != (shape[1], shape[2]) {
            return Err(ModelError::Contract(format!(
                "mask {:?} does not fit attention weights {shape:?}",
                mask.dims()
            )));
        }
        let bias = g.constant(mask.bias(shape[0])?);
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax(scores, 2)?;
    let out = g.bmm(weights, v, false)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2, 3], &[0.3, -1.0, 2.0, 5.0, 1.0, 0.0]));
        let k = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let v = g.constant(t(&[1, 1, 2], &[7.0, -4.0]));
        let (out, w) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0]);
        assert_eq!(g.value(out).data(), &[7.0, -4.0, 7.0, -4.0]);
    }

    #[test]
    fn equal_scores_average_values() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 1], &[1.0]));
        let k = g.constant(t(&[1, 2, 1], &[2.0, 2.0]));
        let v = g.constant(t(&[1, 2, 1], &[1.0, 5.0]));
        let (out, _) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        assert_eq!(g.value(out).data(), &[3.0]);
    }

    #[test]
    fn closed_form_weights() {
        // d_k = 1, so the logits are q·k = [0, ln 3]
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 1], &[1.0]));
        let k = g.constant(t(&[1, 2, 1], &[0.0, 3f64.ln()]));
        let v = g.constant(t(&[1, 2, 1], &[1.0, 5.0]));
        let (out, w) = scaled_dot_product_attention(&mut g, q, k, v, None).unwrap();
        let w = g.value(w).data().to_vec();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!((g.value(out).item() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 1], &[1.0]));
        let k = g.constant(t(&[1, 2, 1], &[0.0, 50.0]));
        let v = g.constant(t(&[1, 2, 1], &[1.0, 5.0]));
        let mask = Mask::keys(&[true, false], 1, 1);
        let (out, w) = scaled_dot_product_attention(&mut g, q, k, v, Some(&mask)).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 0.0]);
        assert_eq!(g.value(out).item(), 1.0);
    }

    #[test]
    fn mismatched_depths_are_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 3]));
        let k = g.constant(Tensor::zeros(&[1, 2, 4]));
        let v = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(scaled_dot_product_attention(&mut g, q, k, v, None).is_err());
    }

    #[test]
    fn causal_triangle() {
        assert!(causal_mask(1).allowed(0, 0, 0));
        let m = causal_mask(3);
        assert_eq!(m.blocked_count(), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.allowed(0, i, j), j <= i);
            }
        }
    }

    #[test]
    fn conjunction_blocks_if_either_blocks() {
        let causal = causal_mask(3);
        let pad = Mask::keys(&[true, true, false, true, false, false], 2, 3);
        let both = causal.and(&pad).unwrap();
        assert_eq!(both.dims(), (2, 3, 3));
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(both.allowed(b, i, j), causal.allowed(0, i, j) && pad.allowed(b, i, j));
                }
            }
        }
    }

    #[test]
    fn bias_groups_heads_by_batch() {
        let m = Mask::keys(&[true, false, false, true], 2, 1);
        let bias = m.bias::<f64>(4).unwrap();
        // heads 0,1 belong to batch 0; heads 2,3 to batch 1
        assert_eq!(bias.data(), &[0.0, BLOCKED, 0.0, BLOCKED, BLOCKED, 0.0, BLOCKED, 0.0]);
        assert!(m.bias::<f64>(3).is_err());
    }
}
