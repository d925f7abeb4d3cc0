//! Graph-recording reverse-mode autodiff.
//!
//! A [`Tape`] is an append-only list of nodes; node indices are already a
//! topological order, so the backward sweep is a single reverse pass.
//! Parameters enter by reference and are deduplicated by address, which is
//! also how [`Gradients::of`] finds them again after the sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::numerics::ops::{self, gelu_grad_scalar, sigmoid_scalar, softplus_scalar};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softplus(Var),
    Sum(Var),
    Bce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    Reshape(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn addr<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a borrowed parameter. Gradients are tracked when the tensor's
    /// `requires_grad` flag is set; the same tensor always maps to the same var.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&addr(t)) {
            return v;
        }
        let v = self.push_unchecked(Cow::Borrowed(t), Op::Leaf, t.requires_grad());
        self.params.insert(addr(t), v);
        v
    }

    /// Owned leaf, e.g. an input that a test differentiates against.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_unchecked(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_unchecked(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(Cow::Owned(value), op, needs))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(
                Dimension,
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * s).collect())?;
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    /// `a[N×D] + b[D]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = self.dims2(a)?;
        if self.value(b).len() != d {
            bail!(
                Dimension,
                "add_row: row length {d} vs bias {:?}",
                self.value(b).shape()
            );
        }
        let x = self.value(a);
        let bias = self.value(b).data();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, b), &[a, b], "add_row")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat_rows of nothing");
        };
        let (_, d) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != d {
                bail!(Dimension, "concat_rows: column counts {d} and {c} differ");
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, d], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.dims2(a)?;
        if start + len > r {
            bail!(Dimension, "slice_rows {start}..{} of {r} rows", start + len);
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new([len, d], data)?;
        self.push(out, Op::SliceRows(a, start), &[a], "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat_cols of nothing");
        };
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                bail!(Dimension, "concat_cols: row counts {rows} and {r} differ");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new([rows, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start + len > c {
            bail!(Dimension, "slice_cols {start}..{} of {c} cols", start + len);
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new([r, len], data)?;
        self.push(out, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if c == 0 {
            bail!(Dimension, "softmax over an empty axis");
        }
        let out = Tensor::new([r, c], ops::softmax_rows_raw(self.value(a).data(), c))?;
        self.push(out, Op::SoftmaxRows(a), &[a], "softmax")
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            bail!(Parameter, "layernorm eps must be positive, got {eps}");
        }
        let (_, d) = self.dims2(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            bail!(Dimension, "layernorm affine params do not match dim {d}");
        }
        let (out, stats) = ops::layernorm_raw(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: stats.xhat,
            rstd: stats.rstd,
        };
        self.push(out, op, &[x, gamma, beta], "layernorm")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = ops::gelu(self.value(a))?;
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, softplus_scalar)?;
        self.push(out, Op::Softplus(a), &[a], "softplus")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Weighted mean binary cross-entropy on logits:
    /// `Σ wᵢ·bce(zᵢ, tᵢ) / Σ wᵢ`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if targets.len() != z.len() || weights.len() != z.len() {
            bail!(Dimension, "bce: {} logits, {} targets, {} weights", z.len(), targets.len(), weights.len());
        }
        let wsum: T = weights.iter().copied().sum();
        if !(wsum > T::zero()) {
            bail!(Parameter, "bce weights must have positive sum");
        }
        let mut l = T::zero();
        for ((&zi, &ti), &wi) in z.iter().zip(targets).zip(weights) {
            l += wi * (zi.max(T::zero()) - zi * ti + (-zi.abs()).exp().ln_1p());
        }
        let op = Op::Bce {
            logits,
            targets: targets.to_vec(),
            weights: weights.iter().map(|&w| w / wsum).collect(),
        };
        self.push(Tensor::scalar(l / wsum), op, &[logits], "bce")
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if target.len() != p.len() || p.is_empty() {
            bail!(Dimension, "l1: {} predictions vs {} targets", p.len(), target.len());
        }
        let n = T::from_usize(p.len()).unwrap();
        let l = p.iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let op = Op::L1 {
            pred,
            target: target.to_vec(),
        };
        self.push(Tensor::scalar(l), op, &[pred], "l1")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut by_var = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let len = node.value.len();
                by_var[i] = Some(grads[i].take().unwrap_or_else(|| vec![T::zero(); len]));
            }
        }
        Ok(Gradients {
            by_var,
            params: self.params,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.value(v);
        let mut acc = |v: Var, delta: Vec<T>| {
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, d) in buf.iter_mut().zip(delta) {
                        *b += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if needs(*a) {
                    acc(*a, ops::mm_nt(g, val(*b).data(), m, n, k));
                }
                if needs(*b) {
                    acc(*b, ops::mm_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (n, _) = val(*b).dims2()?;
                if needs(*a) {
                    acc(*a, ops::mm(g, val(*b).data(), m, n, k));
                }
                if needs(*b) {
                    acc(*b, ops::mm_tn(g, val(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b).data()).map(|(&p, &q)| p * q).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a).data()).map(|(&p, &q)| p * q).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::AddRow(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    let d = val(*b).len();
                    let mut col = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (c, &v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    acc(*b, col);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        acc(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, d) = val(*a).dims2()?;
                let mut full = vec![T::zero(); val(*a).len()];
                full[start * d..start * d + g.len()].copy_from_slice(g);
                acc(*a, full);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.dims2()?.1;
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = val(p).dims2()?;
                    if needs(p) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        acc(p, part);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, c) = val(*a).dims2()?;
                let w = g.len() / rows.max(1);
                let mut full = vec![T::zero(); rows * c];
                for r in 0..rows {
                    full[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*a, full);
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.dims2()?.1;
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma).data();
                let d = gm.len();
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    acc(*beta, db);
                }
                if needs(*x) {
                    let nd = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let dh: Vec<T> = gr.iter().zip(gm).map(|(&p, &q)| p * q).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            dr[j] = rstd[r] / nd * (nd * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(&p, &q)| p * gelu_grad_scalar(q)).collect());
            }
            Op::Softplus(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(&p, &q)| p * sigmoid_scalar(q)).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let z = val(*logits).data();
                let dz = z
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&zi, &ti), &wi)| g[0] * wi * (sigmoid_scalar(zi) - ti))
                    .collect();
                acc(*logits, dz);
            }
            Op::L1 { pred, target } => {
                let p = val(*pred).data();
                let n = T::from_usize(p.len()).unwrap();
                let dp = p
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| {
                        let s = if a > b {
                            T::one()
                        } else if a < b {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[0] * s / n
                    })
                    .collect();
                acc(*pred, dp);
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_var: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter registered through [`Tape::param`].
    pub fn of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&addr(t)).and_then(|&v| self.get(v))
    }

    /// Writes each registered parameter's gradient into its `grad` buffer.
    pub fn write_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        for t in params {
            if let Some(g) = self.of(t) {
                let g = g.to_vec();
                t.set_grad(g)?;
            }
        }
        Ok(())
    }
}
