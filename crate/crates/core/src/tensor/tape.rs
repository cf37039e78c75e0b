use std::cell::Cell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense `rows × cols` table of row indices (a KNN neighbor table, or any
/// gather pattern).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTable {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl IndexTable {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("index table", &[rows, cols], &[data.len()]));
        }
        Ok(IndexTable { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("index table", &[cols], &[r.len()]));
            }
            data.extend(r.iter().map(|&i| i as u32));
        }
        Ok(IndexTable {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.data[row * self.cols + col] as usize
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.data
    }

    /// Every entry of row `i` is `i`.
    pub fn identity(rows: usize, cols: usize) -> Self {
        let data = (0..rows).flat_map(|i| std::iter::repeat_n(i as u32, cols)).collect();
        IndexTable { rows, cols, data }
    }

    fn check_bounds(&self, bound: usize) -> Result<()> {
        for (flat, &ix) in self.data.iter().enumerate() {
            if ix as usize >= bound {
                return Err(Error::Index {
                    row: flat / self.cols,
                    col: flat % self.cols,
                    index: ix as usize,
                    bound,
                });
            }
        }
        Ok(())
    }
}

/// Edge-feature layout for [`Tape::edge_affine`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeInput {
    /// `f_i ⊕ f_ij`
    Concat,
    /// `(f_i − f_ij) ⊕ f_ij`
    DiffConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train { eps: f64 },
    Eval { mean: &'a [T], var: &'a [T], eps: f64 },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, used for running-stat updates.
    pub var_unbiased: Vec<T>,
    pub count: usize,
}

thread_local! {
    static BROKEN_SOFTMAX: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with softmax normalization disabled on this thread. Exists only
/// so the verification harness can prove its normalization check bites.
#[doc(hidden)]
pub fn with_broken_softmax<R>(f: impl FnOnce() -> R) -> R {
    BROKEN_SOFTMAX.with(|c| c.set(true));
    let out = f();
    BROKEN_SOFTMAX.with(|c| c.set(false));
    out
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LeakyRelu(Var, T),
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gather {
        src: Var,
        idx: Vec<u32>,
    },
    EdgeAffine {
        src: Var,
        idx: Vec<u32>,
        k: usize,
        w: Var,
        b: Option<Var>,
        input: EdgeInput,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requested them.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Concatenate along `axis`, which must be the last (channel) axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() || axis != lead.len() - 1 {
            return Err(Error::Usage(format!(
                "concat is only defined on the channel axis ({}), got axis {axis}",
                lead.len().saturating_sub(1)
            )));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `x · w + b` applied to the last axis of `x`; `w` is `in × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("affine bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * s })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, s), rg)
    }

    fn reduce_shape(&self, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("axis {axis} out of range for shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyReduction { axis, shape });
        }
        let (o, n, i) = split_axis(&shape, axis);
        let mut out = shape;
        out.remove(axis);
        Ok((out, o, n, i))
    }

    fn sum_raw(&self, x: Var, outer: usize, n: usize, inner: usize) -> Vec<T> {
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..n {
                add_into(dst, &d[(o * n + j) * inner..(o * n + j + 1) * inner]);
            }
        }
        out
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, o, n, i) = self.reduce_shape(x, axis)?;
        let out = self.sum_raw(x, o, n, i);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, o, n, i) = self.reduce_shape(x, axis)?;
        let inv = T::one() / T::of(n as f64);
        let out = self.sum_raw(x, o, n, i).into_iter().map(|v| v * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mean { x, axis }, rg))
    }

    /// Maximum along `axis`. Ties resolve to the lowest index, which is also
    /// where the backward pass routes the gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, n, inner) = self.reduce_shape(x, axis)?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&d[base..base + inner]);
            argmax.extend((0..inner).map(|c| base + c));
            let dst = &mut out[o * inner..];
            let arg = &mut argmax[o * inner..];
            for j in 1..n {
                let row = base + j * inner;
                for c in 0..inner {
                    let v = d[row + c];
                    if v > dst[c] {
                        dst[c] = v;
                        arg[c] = row + c;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Max { x, argmax }, rg))
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (_, outer, n, inner) = self.reduce_shape(x, axis)?;
        let broken = BROKEN_SOFTMAX.with(Cell::get);
        let vx = self.value(x);
        let d = vx.data();
        let mut out = vec![T::zero(); d.len()];
        let mut mx = vec![T::zero(); inner];
        let mut total = vec![T::zero(); inner];
        for o in 0..outer {
            let base = o * n * inner;
            mx.copy_from_slice(&d[base..base + inner]);
            for j in 1..n {
                let row = &d[base + j * inner..base + (j + 1) * inner];
                for (m, &v) in mx.iter_mut().zip(row) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
            total.iter_mut().for_each(|t| *t = T::zero());
            for j in 0..n {
                let r = base + j * inner;
                for c in 0..inner {
                    let e = (d[r + c] - mx[c]).exp();
                    out[r + c] = e;
                    total[c] = total[c] + e;
                }
            }
            if !broken {
                for j in 0..n {
                    let r = base + j * inner;
                    for c in 0..inner {
                        out[r + c] = out[r + c] / total[c];
                    }
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// `out[i, j, :] = src[idx[i, j], :]`.
    pub fn gather_rows(&mut self, src: Var, idx: &IndexTable) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &s, &[idx.rows(), idx.cols()]));
        }
        idx.check_bounds(s[0])?;
        let d = s[1];
        let sd = self.value(src).data();
        let mut out = Vec::with_capacity(idx.as_slice().len() * d);
        for &r in idx.as_slice() {
            let r = r as usize;
            out.extend_from_slice(&sd[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![idx.rows(), idx.cols(), d], out)?;
        let rg = self.rg(src);
        Ok(self.push(
            value,
            Op::Gather {
                src,
                idx: idx.as_slice().to_vec(),
            },
            rg,
        ))
    }

    /// Per-edge affine map over neighbor pairs without materializing the
    /// `M × K × 2d` edge tensor.
    ///
    /// For `EdgeInput::Concat` the result is `[f_i ⊕ f_idx[i,j]] · w + b`;
    /// for `EdgeInput::DiffConcat` it is `[(f_i − f_idx[i,j]) ⊕ f_idx[i,j]] · w + b`.
    /// `src` is `M × d`, `w` is `2d × k`, and the output is `M × K × k`.
    pub fn edge_affine(&mut self, src: Var, idx: &IndexTable, w: Var, b: Option<Var>, input: EdgeInput) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let ws = self.shape(w).to_vec();
        if s.len() != 2 || ws.len() != 2 || ws[0] != 2 * s[1] {
            return Err(Error::shape("edge_affine", &s, &ws));
        }
        if idx.rows() != s[0] {
            return Err(Error::shape("edge_affine graph", &s, &[idx.rows(), idx.cols()]));
        }
        let (m, d, k) = (s[0], s[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::shape("edge_affine bias", &ws, self.shape(b)));
            }
        }
        idx.check_bounds(m)?;
        let (top, bottom) = self.edge_weights(w, d, input);
        let x = self.value(src).data();
        let mut center = vec![T::zero(); m * k];
        let mut neigh = vec![T::zero(); m * k];
        T::gemm(m, d, k, x, false, &top, false, &mut center, false);
        T::gemm(m, d, k, x, false, &bottom, false, &mut neigh, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in center.chunks_exact_mut(k) {
                add_into(row, bv);
            }
        }
        let kn = idx.cols();
        let mut out = Vec::with_capacity(m * kn * k);
        for i in 0..m {
            let c = &center[i * k..(i + 1) * k];
            for &r in idx.row(i) {
                let r = r as usize;
                let n = &neigh[r * k..(r + 1) * k];
                out.extend(c.iter().zip(n).map(|(&a, &b)| a + b));
            }
        }
        let value = Tensor::new(vec![m, kn, k], out)?;
        let rg = self.rg(src) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::EdgeAffine {
                src,
                idx: idx.as_slice().to_vec(),
                k: kn,
                w,
                b,
                input,
            },
            rg,
        ))
    }

    /// Split an edge weight `2d × k` into the matrices applied to the center
    /// row and the neighbor row.
    fn edge_weights(&self, w: Var, d: usize, input: EdgeInput) -> (Vec<T>, Vec<T>) {
        let wv = self.value(w).data();
        let k = wv.len() / (2 * d).max(1);
        let top = wv[..d * k].to_vec();
        let mut bottom = wv[d * k..].to_vec();
        if input == EdgeInput::DiffConcat {
            for (b, &t) in bottom.iter_mut().zip(&top) {
                *b = *b - t;
            }
        }
        (top, bottom)
    }

    /// Batch normalization over every axis but the last (channels).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let c = xs.last().copied().unwrap_or(0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &xs, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let n = xv.len() / c.max(1);
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if n < 2 {
                    return Err(Error::Statistics(n));
                }
                let mut mean = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let dv = v.f64() - m;
                        *s += dv * dv;
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &xs, &[mean.len()]));
                }
                (
                    mean.iter().map(|v| v.f64()).collect(),
                    var.iter().map(|v| v.f64()).collect(),
                    eps,
                    false,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean_t[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + bt[ch]);
            }
        }
        let stats = train.then(|| BatchStats {
            mean: mean_t.clone(),
            var_unbiased: var.iter().map(|&v| T::of(v * n as f64 / (n as f64 - 1.0))).collect(),
            count: n,
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(xs, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Cross-entropy of `logits` (`M × C`) against integer labels, computed
    /// through a stable log-softmax. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (m, c) = (s[0], s[1]);
        if let Some((cell, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!("label {l} of cell {cell} is outside [0, {c})")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        for (row, &label) in lv.chunks_exact(c).zip(labels) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.f64()));
            let z: f64 = row.iter().map(|&v| (v.f64() - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[label].f64();
            probs.extend(row.iter().map(|&v| T::of((v.f64() - lse).exp())));
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / m.max(1) as f64,
        };
        let value = Tensor::scalar(T::of(total * scale));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                scale: T::of(scale),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`. Returns gradients for every leaf
    /// created with `requires_grad`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Borrow the gradient slot of `v`, creating a zero buffer if needed.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, part);
                    }
                    offset += w;
                }
            }
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = g.len() / dout.max(1);
                if self.rg(*x) {
                    let dst = self.slot(grads, *x);
                    T::gemm(rows, dout, din, g, false, self.value(*w).data(), true, dst, true);
                }
                if self.rg(*w) {
                    let dst = self.slot(grads, *w);
                    T::gemm(din, rows, dout, self.value(*x).data(), true, g, false, dst, true);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let dst = self.slot(grads, *b);
                        for row in g.chunks_exact(dout) {
                            add_into(dst, row);
                        }
                    }
                }
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { gi * *s })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let factor = match node.op {
                    Op::Mean { .. } => T::one() / T::of(n as f64),
                    _ => T::one(),
                };
                let mut d = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        d.extend(src.iter().map(|&v| v * factor));
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Max { x, argmax } => {
                let dst = self.slot(grads, *x);
                for (&a, &gi) in argmax.iter().zip(g) {
                    dst[a] = dst[a] + gi;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                let mut dot = vec![T::zero(); inner];
                for o in 0..outer {
                    let base = o * n * inner;
                    dot.iter_mut().for_each(|v| *v = T::zero());
                    for j in 0..n {
                        let r = base + j * inner;
                        for c in 0..inner {
                            dot[c] = dot[c] + g[r + c] * y[r + c];
                        }
                    }
                    for j in 0..n {
                        let r = base + j * inner;
                        for c in 0..inner {
                            d[r + c] = y[r + c] * (g[r + c] - dot[c]);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather { src, idx } => {
                let d = self.value(*src).last_dim();
                let dst = self.slot(grads, *src);
                for (e, &r) in idx.iter().enumerate() {
                    let r = r as usize;
                    add_into(&mut dst[r * d..(r + 1) * d], &g[e * d..(e + 1) * d]);
                }
            }
            Op::EdgeAffine {
                src,
                idx,
                k: kn,
                w,
                b,
                input,
            } => self.edge_affine_backward(g, *src, idx, *kn, *w, *b, *input, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c.max(1);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] = sum_g[ch] + gr[ch];
                        sum_gx[ch] = sum_gx[ch] + gr[ch] * hr[ch];
                    }
                }
                if self.rg(*x) {
                    let gm = self.value(*gamma).data();
                    let mut d = Vec::with_capacity(g.len());
                    let nf = T::of(n as f64);
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let v = if *train {
                                gm[ch] * inv_std[ch] / nf * (nf * gr[ch] - sum_g[ch] - hr[ch] * sum_gx[ch])
                            } else {
                                gm[ch] * inv_std[ch] * gr[ch]
                            };
                            d.push(v);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                scale,
            } => {
                let c = self.value(*logits).last_dim();
                let up = g[0] * *scale;
                let mut d: Vec<T> = probs.iter().map(|&p| p * up).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = d[i * c + l] - up;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn edge_affine_backward(
        &self,
        g: &[T],
        src: Var,
        idx: &[u32],
        kn: usize,
        w: Var,
        b: Option<Var>,
        input: EdgeInput,
        grads: &mut [Option<Vec<T>>],
    ) {
        let s = self.shape(src);
        let (m, d) = (s[0], s[1]);
        let k = self.shape(w)[1];
        // Gradients w.r.t. the per-cell center and neighbor projections.
        let mut d_center = vec![T::zero(); m * k];
        let mut d_neigh = vec![T::zero(); m * k];
        for i in 0..m {
            for j in 0..kn {
                let e = i * kn + j;
                let ge = &g[e * k..(e + 1) * k];
                add_into(&mut d_center[i * k..(i + 1) * k], ge);
                let r = idx[e] as usize;
                add_into(&mut d_neigh[r * k..(r + 1) * k], ge);
            }
        }
        let x = self.value(src).data();
        if self.rg(w) {
            let dst = self.slot(grads, w);
            let (top, bottom) = dst.split_at_mut(d * k);
            T::gemm(d, m, k, x, true, &d_center, false, top, true);
            T::gemm(d, m, k, x, true, &d_neigh, false, bottom, true);
            if input == EdgeInput::DiffConcat {
                let mut tmp = vec![T::zero(); d * k];
                T::gemm(d, m, k, x, true, &d_neigh, false, &mut tmp, false);
                for (t, v) in top.iter_mut().zip(tmp) {
                    *t = *t - v;
                }
            }
        }
        if let Some(b) = b {
            if self.rg(b) {
                let dst = self.slot(grads, b);
                for row in d_center.chunks_exact(k) {
                    add_into(dst, row);
                }
            }
        }
        if self.rg(src) {
            let (top, bottom) = self.edge_weights(w, d, input);
            let dst = self.slot(grads, src);
            T::gemm(m, k, d, &d_center, false, &top, true, dst, true);
            T::gemm(m, k, d, &d_neigh, false, &bottom, true, dst, true);
        }
    }
}
