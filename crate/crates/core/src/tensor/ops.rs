//! Forward kernels on detached tensors. The tape reuses these and adds
//! gradient rules on top.

use super::{split_axis, Result, Scalar, Tensor, TensorError};

/// Row-major `c (m×n) = alpha · op(a) · op(b) + beta · c`.
///
/// With `ta`, `a` is stored as `k×m`; with `tb`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every strided access by the slice lengths.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn bmm_dims(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    let bad = || TensorError::Shape {
        op: "bmm",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(bad());
    }
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if sa[2] != kb {
        return Err(bad());
    }
    Ok((sa[0], sa[1], sa[2], n))
}

/// Batched product `[B×m×k] · [B×k×n]`, or `· [B×n×k]ᵀ` when `trans_b`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = bmm_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            false,
            &b.data()[i * k * n..],
            trans_b,
            T::zero(),
            &mut out[i * m * n..],
        );
    }
    Tensor::new(&[batch, m, n], out)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Softmax along `axis`, stabilised by subtracting each slice maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Intermediates kept for the layer-norm gradient.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalises the last axis to zero mean and unit variance, then applies
/// `gain * x̂ + bias`. `gain` and `bias` have the extent of the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let width = *x.shape().last().unwrap();
    if gain.shape() != [width] || bias.shape() != [width] {
        return Err(TensorError::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / width;
    let n = T::from_usize(width).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut normalized = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let denom = var + eps;
        // A constant slice with eps = 0 has nothing to normalise.
        let inv = if denom > T::zero() {
            T::one() / denom.sqrt()
        } else {
            T::zero()
        };
        inv_std.push(inv);
        for j in 0..width {
            let xh = (row[j] - mean) * inv;
            normalized[r * width + j] = xh;
            out[r * width + j] = gain.data()[j] * xh + bias.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::Contract(format!(
            "permute: {perm:?} is not a permutation of {rank} axes"
        )));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; rank];
    for _ in 0..src.len() {
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat: no inputs".into()))?;
    check_axis("concat", first.shape(), axis)?;
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        let same_rank = p.ndim() == first.ndim();
        let agree = same_rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !agree {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&out_shape, out)
}

/// The slice `start..start + len` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("narrow", x.shape(), axis)?;
    let (outer, extent, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > extent {
        return Err(TensorError::Contract(format!(
            "narrow: range {start}..{} outside axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(&out_shape, out)
}
