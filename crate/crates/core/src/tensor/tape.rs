//! Eager reverse-mode autodiff.
//!
//! Every op evaluates immediately and appends a node to the tape. Node ids
//! increase monotonically and inputs always precede outputs, so a single
//! reverse sweep over ids is a valid topological replay.

use super::kernels::{self, gemm};
use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log { x: Var, floor: f64 },
    Softmax { x: Var, axis: usize },
    GroupedSoftmax { x: Var, groups: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CausalAttention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Sum(Var),
    SelectCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or_else(|| TensorError::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = dims2("transpose", ta)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = dims2("add_bias", tx)?;
        if tb.len() != n {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.data().to_vec();
        kernels::add_bias_rows(&mut out, tb.data());
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        kernels::relu_in_place(&mut out);
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Relu(x), rg)
    }

    /// Natural log with inputs clamped from below at `floor`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|v| v.max(floor).ln()).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Log { x, floor }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: tx.rank(),
            });
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Independent softmaxes over consecutive column groups of a matrix.
    pub fn grouped_softmax(&mut self, x: Var, groups: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (_, n) = dims2("grouped_softmax", tx)?;
        if groups.iter().sum::<usize>() != n {
            return Err(TensorError::ShapeMismatch {
                op: "grouped_softmax",
                left: tx.shape().to_vec(),
                right: groups.to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                let mut start = 0;
                for &g in groups {
                    kernels::softmax_in_place(&mut row[start..start + g]);
                    start += g;
                }
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::GroupedSoftmax {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = if n == 0 { 0 } else { tx.len() / n };
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        for r in 0..rows {
            let src = &tx.data()[r * n..(r + 1) * n];
            let (_, s) = kernels::layer_norm_row(src, &ones, &zeros, &mut xhat[r * n..(r + 1) * n]);
            rstd[r] = s;
            for i in 0..n {
                out[r * n + i] = xhat[r * n + i] * tg.data()[i] + tb.data()[i];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `qkv` is `(batch * seq) x (3 * hidden)` holding the query, key and value
    /// projections side by side; the output is `(batch * seq) x hidden`.
    /// Position `i` attends to positions `0..=i` of its own sequence only.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(qkv);
        let (rows, cols) = dims2("causal_attention", t)?;
        if rows != batch * seq || cols % 3 != 0 || (cols / 3) % heads.max(1) != 0 || heads == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                left: t.shape().to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        let hidden = cols / 3;
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = t.data();
        let mut out = vec![0.0; rows * hidden];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = (b * seq + i) * cols + h * dh;
                    let prow = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = (b * seq + j) * cols + hidden + h * dh;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += x[qrow + d] * x[krow + d];
                        }
                        *p = s * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = (b * seq + i) * hidden + h * dh;
                    for j in 0..=i {
                        let p = probs[pbase + i * seq + j];
                        let vrow = (b * seq + j) * cols + 2 * hidden + h * dh;
                        for d in 0..dh {
                            out[orow + d] += p * x[vrow + d];
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::new(vec![rows, hidden], out)?,
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn select_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (r, c) = dims2("select_cols", tx)?;
        if start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "select_cols",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SelectCols { x, start }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let (r, _) = dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (rr, c) = dims2("concat_cols", t)?;
            if rr != r {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Only leaves and intermediate nodes that require gradients keep them.
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        assert!(v.0 < grads.len(), "graph cycle");
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, tb.data(), true, ga, true));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, ta.data(), true, g, false, gb, true));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * tb[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ta[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let n = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += c * b;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if tx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Log { x, floor } => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if tx[i] > *floor {
                            gx[i] += g[i] / tx[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                            for j in 0..len {
                                let k = base + j * inner;
                                gx[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                });
            }
            Op::GroupedSoftmax { x, groups } => {
                let y = out.data();
                let n: usize = groups.iter().sum();
                self.accumulate(grads, *x, |gx| {
                    if n == 0 {
                        return;
                    }
                    for r in 0..y.len() / n {
                        let mut start = r * n;
                        for &len in groups {
                            let dot: f64 = (start..start + len).map(|k| y[k] * g[k]).sum();
                            for k in start..start + len {
                                gx[k] += y[k] * (g[k] - dot);
                            }
                            start += len;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain).data();
                let n = tg.len();
                self.accumulate(grads, *gain, |gg| {
                    for (gr, xr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for i in 0..n {
                            gg[i] += gr[i] * xr[i];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let nf = n as f64;
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..n {
                            let d = gr[i] * tg[i];
                            mean_d += d;
                            mean_dx += d * xr[i];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for i in 0..n {
                            let d = gr[i] * tg[i];
                            gx[r * n + i] += s * (d - mean_d - xr[i] * mean_dx);
                        }
                    }
                });
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let x = self.value(*qkv).data();
                let cols = self.value(*qkv).dims2().unwrap().1;
                let hidden = cols / 3;
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let dh = hidden / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                self.accumulate(grads, *qkv, |gx| {
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let pbase = (b * heads + h) * seq * seq;
                            for i in 0..seq {
                                let orow = (b * seq + i) * hidden + h * dh;
                                let go = &g[orow..orow + dh];
                                let p = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                                let mut dot = 0.0;
                                for j in 0..=i {
                                    let vrow = (b * seq + j) * cols + 2 * hidden + h * dh;
                                    let mut s = 0.0;
                                    for d in 0..dh {
                                        s += go[d] * x[vrow + d];
                                        gx[vrow + d] += p[j] * go[d];
                                    }
                                    dp[j] = s;
                                    dot += p[j] * s;
                                }
                                let qrow = (b * seq + i) * cols + h * dh;
                                for j in 0..=i {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow = (b * seq + j) * cols + hidden + h * dh;
                                    for d in 0..dh {
                                        gx[qrow + d] += ds * x[krow + d];
                                        gx[krow + d] += ds * x[qrow + d];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::SelectCols { x, start } => {
                let c = self.value(*x).dims2().unwrap().1;
                let len = out.dims2().unwrap().1;
                let start = *start;
                if len == 0 {
                    return;
                }
                self.accumulate(grads, *x, |gx| {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * c + start..r * c + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.dims2().unwrap().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    self.accumulate(grads, p, |gp| {
                        if w == 0 {
                            return;
                        }
                        for (r, gr) in gp.chunks_exact_mut(w).enumerate() {
                            add_into(gr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x`, compared with `grad`.
    fn check_grad(x: &Tensor, grad: &[f64], f: &dyn Fn(&Tensor) -> f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "index {i}: fd {fd} vs autodiff {}",
                grad[i]
            );
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let loss = tape.scale(x, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    /// Reduces an arbitrary output to a scalar with fixed random weights so
    /// every output entry contributes to the checked gradient.
    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.value(y).shape(), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    fn check_unary(shape: &[usize], seed: u64, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let eval = |x: &Tensor| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let y = build(&mut tape, v);
            let l = weighted_sum(&mut tape, y, seed + 1);
            let g = tape.backward(l).unwrap();
            (tape.value(l).data()[0], Some(g.wrt(v).into_data()))
        };
        let (_, g) = eval(&x0);
        check_grad(&x0, &g.unwrap(), &|x| eval(x).0);
    }

    #[test]
    fn gradient_checks_for_primitives() {
        check_unary(&[3, 4], 1, &|t, x| {
            let w = t.constant(Tensor::from_rows(&[
                vec![0.3, -0.2],
                vec![0.1, 0.5],
                vec![-0.7, 0.4],
                vec![0.2, 0.2],
            ]));
            t.matmul(x, w).unwrap()
        });
        check_unary(&[4, 2], 2, &|t, w| {
            let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, -1.0, 0.5]]));
            t.matmul(x, w).unwrap()
        });
        check_unary(&[3, 2], 3, &|t, x| t.transpose(x).unwrap());
        check_unary(&[2, 3], 4, &|t, x| t.relu(x));
        check_unary(&[2, 3], 5, &|t, x| t.softmax(x, 1).unwrap());
        check_unary(&[2, 3, 2], 6, &|t, x| t.softmax(x, 1).unwrap());
        check_unary(&[2, 5], 7, &|t, x| t.grouped_softmax(x, &[2, 3]).unwrap());
        check_unary(&[3, 4], 8, &|t, x| {
            let g = t.constant(Tensor::new(vec![4], vec![1.0, 0.5, -1.0, 2.0]).unwrap());
            let b = t.constant(Tensor::new(vec![4], vec![0.1, 0.0, 0.3, -0.2]).unwrap());
            t.layer_norm(x, g, b).unwrap()
        });
        check_unary(&[4], 9, &|t, g| {
            let x = t.constant(Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.0], vec![1.0, 1.5, -0.5, 0.2]]));
            let b = t.constant(Tensor::zeros(&[4]));
            t.layer_norm(x, g, b).unwrap()
        });
        check_unary(&[2, 3], 10, &|t, x| {
            let y = t.relu(x);
            let s = t.scale(x, 2.0);
            let p = t.add(y, s).unwrap();
            t.sub(p, x).unwrap()
        });
        check_unary(&[2, 3], 11, &|t, b| {
            let x = t.constant(Tensor::full(&[4, 3], 0.5));
            let row = t.select_cols(b, 1, 2).unwrap();
            let x2 = t.select_cols(x, 0, 2).unwrap();
            let rr = t.transpose(row).unwrap();
            let m = t.matmul(x2, rr).unwrap();
            t.concat_cols(&[m, x2]).unwrap()
        });
        check_unary(&[2, 3], 12, &|t, x| {
            let sq = t.mul(x, x).unwrap();
            let shifted = t.constant(Tensor::full(&[2, 3], 0.1));
            let p = t.add(sq, shifted).unwrap();
            t.log_clamped(p, 1e-12)
        });
        check_unary(&[3], 13, &|t, b| {
            let x = t.constant(Tensor::full(&[2, 3], 0.5));
            t.add_bias(x, b).unwrap()
        });
    }

    #[test]
    fn gradient_check_causal_attention() {
        for (batch, seq, heads, hidden) in [(1, 1, 1, 2), (2, 3, 2, 4), (1, 4, 1, 3)] {
            check_unary(&[batch * seq, 3 * hidden], 20 + seq as u64, &|t, x| {
                t.causal_attention(x, batch, seq, heads).unwrap()
            });
        }
    }

    #[test]
    fn random_three_op_chains_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let ops: Vec<u32> = (0..3).map(|_| rng.random_range(0..6)).collect();
            check_unary(&[3, 3], 100 + trial, &|t, x| {
                let mut cur = x;
                for &op in &ops {
                    cur = match op {
                        0 => t.relu(cur),
                        1 => t.softmax(cur, 1).unwrap(),
                        2 => {
                            let w = t.constant(Tensor::from_rows(&[
                                vec![0.5, -0.3, 0.2],
                                vec![0.1, 0.9, -0.4],
                                vec![-0.6, 0.2, 0.7],
                            ]));
                            t.matmul(cur, w).unwrap()
                        }
                        3 => {
                            let g = t.constant(Tensor::full(&[3], 1.3));
                            let b = t.constant(Tensor::full(&[3], -0.1));
                            t.layer_norm(cur, g, b).unwrap()
                        }
                        4 => t.mul(cur, cur).unwrap(),
                        _ => t.transpose(cur).unwrap(),
                    };
                }
                cur
            });
        }
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.param(random(&[4, 6], &mut rng));
            let a = tape.causal_attention(x, 2, 2, 2).unwrap();
            let l = weighted_sum(&mut tape, a, 6);
            let g = tape.backward(l).unwrap();
            (tape.value(a).clone(), g.wrt(x))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_single_position_is_value_passthrough() {
        let mut tape = Tape::new();
        let qkv = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0, 0.2, 9.0, 4.0, -2.5]]));
        let out = tape.causal_attention(qkv, 1, 1, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, -2.5]);
    }
}
