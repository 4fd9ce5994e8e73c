use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::ops::{self, gemm, LayerNormCache};
use super::{split_axis, Result, Scalar, Tensor, TensorError};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cache: LayerNormCache<T> },
    Dropout { x: usize, mask: Vec<T> },
    Embedding { table: usize, ids: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, pad: usize, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of operations. Every node's inputs precede it, so a
/// reverse sweep visits each node once after all of its consumers.
#[derive(Debug)]
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// True when `b` can be expanded to `a` by repeating along leading axes.
fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "Var used with a foreign graph");
        v.index as usize
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: (self.nodes.len() - 1) as u32,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable input: receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last [`Graph::backward`] output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let i = self.idx(v);
        let g = self.grads.get(i)?.as_ref()?;
        Some(Tensor::new(self.nodes[i].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        let i = self.idx(v);
        self.grads.get(i)?.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = ops::bmm(&self.nodes[ia].value, &self.nodes[ib].value, trans_b)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Bmm { a: ia, b: ib, trans_b }, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !trailing_broadcast(va.shape(), vb.shape()) {
            return Err(TensorError::Shape {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vb.numel();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % n]))
            .collect();
        Ok((ia, ib, Tensor::new(va.shape(), data)?))
    }

    /// `a + b`, with `b` either the same shape or a trailing suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|x| x * k);
        let rg = self.rg(ia);
        self.push(out, Op::Scale(ia, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|x| x + k);
        let rg = self.rg(ia);
        self.push(out, Op::AddScalar(ia), rg)
    }

    /// `1 - a`, the complement used by gated cells.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = ops::relu(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push(out, Op::Relu(ia), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = ops::tanh(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push(out, Op::Tanh(ia), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = ops::sigmoid(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push(out, Op::Sigmoid(ia), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x);
        let out = ops::softmax(&self.nodes[ix].value, axis)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Softmax { x: ix, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gain), self.idx(bias));
        let (out, cache) = ops::layer_norm(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                cache,
            },
            rg,
        ))
    }

    /// Inverted dropout: kept activations are divided by the keep probability,
    /// so evaluation needs no rescaling. `rate == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let ix = self.idx(x);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[ix].value.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = &self.nodes[ix].value;
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape(), data)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Dropout { x: ix, mask }, rg))
    }

    /// Gathers rows of `table` (`[vocab × width]`) into `[ids.len() × width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table);
        let tv = &self.nodes[it].value;
        if tv.ndim() != 2 || ids.is_empty() {
            return Err(TensorError::Contract(format!(
                "embedding: table {:?} with {} ids",
                tv.shape(),
                ids.len()
            )));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Contract(format!(
                    "embedding: id {id} outside table of {rows} rows"
                )));
            }
            data.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let out = Tensor::new(&[ids.len(), width], data)?;
        let rg = self.rg(it);
        Ok(self.push(
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let out = self.nodes[ix].value.reshape(shape)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let ix = self.idx(x);
        let out = ops::permute(&self.nodes[ix].value, perm)?;
        let rg = self.rg(ix);
        Ok(self.push(
            out,
            Op::Permute {
                x: ix,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = ops::concat(&values, axis)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Concat { parts: idx, axis }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x);
        let out = ops::narrow(&self.nodes[ix].value, axis, start, len)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Narrow { x: ix, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let total = self.nodes[ix].value.data().iter().copied().sum();
        let rg = self.rg(ix);
        self.push(Tensor::scalar(total), Op::Sum(ix), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let v = &self.nodes[ix].value;
        let total: T = v.data().iter().copied().sum();
        let mean = total / T::from_usize(v.numel()).unwrap();
        let rg = self.rg(ix);
        self.push(Tensor::scalar(mean), Op::Mean(ix), rg)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the last axis, skipping positions whose target is `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let il = self.idx(logits);
        let lv = &self.nodes[il].value;
        let classes = *lv.shape().last().unwrap();
        let rows = lv.numel() / classes;
        if rows != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(TensorError::Contract(
                "cross_entropy: every target position is padding".into(),
            ));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            if target >= classes {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: target {target} outside {classes} classes"
                )));
            }
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            total += log_z - row[target];
            for (p, &x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. Gradients accumulate additively
    /// into every input that feeds more than one consumer.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if output.graph != self.id || output.index as usize >= self.nodes.len() {
            return Err(TensorError::NoGraph);
        }
        let out = output.index as usize;
        if !self.nodes[out].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        if !self.nodes[out].requires_grad {
            return Err(TensorError::NoGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(vec![T::one()]);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let numel = |j: usize| nodes[j].value.numel();
        // Lazily materialises an input gradient buffer; skipped for constants.
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![T::zero(); numel(j)]);
                f(buf);
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(a, &mut |ga| gemm(m, n, k, g, false, nodes[b].value.data(), true, T::one(), ga));
                acc(b, &mut |gb| gemm(k, m, n, nodes[a].value.data(), true, g, false, T::one(), gb));
            }
            &Op::Bmm { a, b, trans_b } => {
                let (batch, m, k, n) =
                    ops::bmm_dims(nodes[a].value.shape(), nodes[b].value.shape(), trans_b).unwrap();
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                acc(a, &mut |ga| {
                    for t in 0..batch {
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, &g[t * m * n..], false, &vb[t * k * n..], !trans_b, T::one(), &mut ga[t * m * k..]);
                    }
                });
                acc(b, &mut |gb| {
                    for t in 0..batch {
                        if trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(n, m, k, &g[t * m * n..], true, &va[t * m * k..], false, T::one(), &mut gb[t * k * n..]);
                        } else {
                            gemm(k, m, n, &va[t * m * k..], true, &g[t * m * n..], false, T::one(), &mut gb[t * k * n..]);
                        }
                    }
                });
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(b, &mut |gb| {
                    let n = gb.len();
                    for (j, &d) in g.iter().enumerate() {
                        gb[j % n] += sign * d;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                let n = vb.len();
                acc(a, &mut |ga| {
                    for (j, &d) in g.iter().enumerate() {
                        ga[j] += d * vb[j % n];
                    }
                });
                acc(b, &mut |gb| {
                    for (j, &d) in g.iter().enumerate() {
                        gb[j % n] += d * va[j];
                    }
                });
            }
            &Op::Scale(a, k) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += k * d)),
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d))
            }
            &Op::Relu(a) => {
                let va = nodes[a].value.data();
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        if va[j] > T::zero() {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * (T::one() - y[j] * y[j]);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), axis);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for s in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + s;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let width = *node.value.shape().last().unwrap();
                let rows = g.len() / width;
                let gamma = nodes[*gain].value.data();
                let xhat = &cache.normalized;
                acc(*x, &mut |gx| {
                    let n = T::from_usize(width).unwrap();
                    for r in 0..rows {
                        let span = r * width..(r + 1) * width;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dxhat: Vec<T> = gr.iter().zip(gamma).map(|(&d, &w)| d * w).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&d, &h)| d * h).sum::<T>() / n;
                        let inv = cache.inv_std[r];
                        for j in 0..width {
                            gx[r * width + j] += inv * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (j, &d) in g.iter().enumerate() {
                        gg[j % width] += d * xhat[j];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (j, &d) in g.iter().enumerate() {
                        gb[j % width] += d;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let width = nodes[*table].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            gt[id * width + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec()).unwrap();
                let back = ops::permute(&gt, &inverse).unwrap();
                acc(*x, &mut |gx| gx.iter_mut().zip(back.data()).for_each(|(a, &d)| *a += d));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gp[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let (outer, extent, inner) = split_axis(nodes[x].value.shape(), axis);
                let len = node.value.shape()[axis];
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let d = g[0] / T::from_usize(numel(x)).unwrap();
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let classes = *nodes[*logits].value.shape().last().unwrap();
                let scale = g[0] / T::from_usize(*count).unwrap();
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for c in 0..classes {
                            gl[r * classes + c] += scale * probs[r * classes + c];
                        }
                        gl[r * classes + t] -= scale;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 4., 9.]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let a = g.scale(x, 2.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
        let c = g.constant(Tensor::ones(&[2]));
        let s = g.sum(c);
        assert_eq!(g.backward(s), Err(TensorError::NoGraph));
        let mut other = Graph::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert_eq!(g.backward(y), Err(TensorError::NoGraph));
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let b = g.leaf(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 1., 2., 1., 2.]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3., 3.]);
        let bad = g.leaf(Tensor::zeros(&[3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn dropout_is_inverted_and_identity_at_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(&[1000]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::new();
        let uniform = g.leaf(Tensor::zeros(&[2, 5]));
        let l = g.cross_entropy(uniform, &[1, 3], 0).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let two = g.leaf(Tensor::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap());
        let l = g.cross_entropy(two, &[1], 9).unwrap();
        assert!((g.value(l).item() + 0.75f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(uniform, &[0, 0], 0).is_err());
    }
}
