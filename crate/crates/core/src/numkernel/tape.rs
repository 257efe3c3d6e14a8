//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] walks the nodes in reverse creation order
//! and accumulates adjoints, so a node's gradient is complete before it is
//! propagated to its parents. Nodes that do not depend on any parameter are
//! skipped.

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use super::EPS_NORM;
use crate::error::{dim_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Exp(Var),
    LnClamped(Var, f64),
    Sum(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRowGroups(Var, usize),
    MeanCols(Var),
    LogSoftmaxRows(Var),
    BatchNorm { x: Var, inv_std: Vec<f64> },
    RowCosine(Var, Var),
    CosineGram(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pair.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; a zero tensor when `v` does not affect
    /// the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Adds `delta` to the gradient of `v`. Exists so self-tests can inject
    /// faults into an otherwise correct gradient.
    pub fn perturb(&mut self, v: Var, delta: f64) {
        let shape = self.shapes[v.0].clone();
        let g = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape));
        for x in g.data_mut() {
            *x += delta;
        }
    }
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return dim_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return dim_err(format!("matmul_bt [{m},{k}] x [{n},{}]^T", tb.cols()));
        }
        let out = Tensor::matrix(m, n, matmul_bt_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return dim_err("scale_by expects a single-element factor");
        }
        let c = self.scalar(s);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    fn row_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let n = tx.cols();
        if tv.len() != n {
            return dim_err(format!("row broadcast of {} over {n} columns", tv.len()));
        }
        let vd = tv.data();
        let mut out = tx.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            if mul {
                *o *= vd[i % n];
            } else {
                *o += vd[i % n];
            }
        }
        let rg = self.rg(x) || self.rg(v);
        let op = if mul { Op::MulRow(x, v) } else { Op::AddRow(x, v) };
        Ok(self.push(out, op, rg))
    }

    /// Adds vector `v` to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, false)
    }

    /// Multiplies every row of `x` elementwise by `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_broadcast(x, v, true)
    }

    /// Which side of its kink every piecewise op input lies on, in recording
    /// order. Two evaluations with equal patterns stay on the same smooth
    /// piece of the graph.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|v| *v > 0.0)),
                Op::LnClamped(x, eps) => out.extend(self.value(x).data().iter().map(|v| *v > eps)),
                _ => {}
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    /// `ln(max(x, eps))`.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let out = self.value(x).map(|v| v.max(eps).ln());
        let rg = self.rg(x);
        self.push(out, Op::LnClamped(x, eps), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&ts)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Averages each run of `group` consecutive rows: `[m·group, n] -> [m, n]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, n) = (t.rows(), t.cols());
        if group == 0 || r % group != 0 {
            return dim_err(format!("{r} rows cannot be grouped by {group}"));
        }
        let m = r / group;
        let mut out = vec![0.0; m * n];
        let inv = 1.0 / group as f64;
        for i in 0..r {
            let o = &mut out[(i / group) * n..(i / group + 1) * n];
            for (ov, &v) in o.iter_mut().zip(t.row(i)) {
                *ov += v * inv;
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRowGroups(x, group), rg))
    }

    /// Mean over columns: `[m, n] -> [m, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if n == 0 {
            return dim_err("mean over zero columns");
        }
        let out: Vec<f64> = (0..m).map(|i| t.row(i).iter().sum::<f64>() / n as f64).collect();
        let out = Tensor::matrix(m, 1, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanCols(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if n == 0 {
            return dim_err("log-softmax over zero columns");
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), rg))
    }

    /// Per-column standardization using batch statistics (biased variance).
    /// Returns the normalized output together with the per-column batch mean
    /// and biased variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if m == 0 {
            return dim_err("batch norm over an empty batch");
        }
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (mu, &v) in mean.iter_mut().zip(t.row(i)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut var = vec![0.0; n];
        for i in 0..m {
            for ((s, &v), &mu) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = t.clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            let j = idx % n;
            *o = (*o - mean[j]) * inv_std[j];
        }
        let rg = self.rg(x);
        let v = self.push(out, Op::BatchNorm { x, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Row-wise cosine similarity of two equally shaped matrices: `[m]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "row cosine")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.rows();
        let out: Vec<f64> = (0..m)
            .map(|i| cosine_parts(ta.row(i), tb.row(i)).0)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::RowCosine(a, b), rg))
    }

    /// Cosine similarity between every pair of rows: `[m, n] -> [m, m]`.
    pub fn cosine_gram(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.rows();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = cosine_parts(t.row(i), t.row(j)).0;
            }
        }
        let out = Tensor::matrix(m, m, out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::CosineGram(a), rg))
    }

    /// Reverse pass from the single-element node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let d = matmul_bt_raw(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = matmul_at_raw(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).unwrap());
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    let d = matmul_raw(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = matmul_at_raw(g.data(), ta.data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * c));
                if self.rg(*s) {
                    let d: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![d]).unwrap());
                }
            }
            Op::AddRow(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*v) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[i % n] += gv;
                    }
                    self.accumulate(grads, *v, Tensor::new(val(*v).shape().to_vec(), d).unwrap());
                }
            }
            Op::MulRow(x, v) => {
                let n = g.cols();
                let vd = val(*v).data();
                if self.rg(*x) {
                    let mut d = g.clone();
                    for (i, o) in d.data_mut().iter_mut().enumerate() {
                        *o *= vd[i % n];
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.rg(*v) {
                    let xd = val(*x).data();
                    let mut d = vec![0.0; n];
                    for (i, &gv) in g.data().iter().enumerate() {
                        d[i % n] += gv * xd[i];
                    }
                    self.accumulate(grads, *v, Tensor::new(val(*v).shape().to_vec(), d).unwrap());
                }
            }
            Op::Relu(x) => {
                let d = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = g.zip_map(&node.value, |gv, ov| gv * ov).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::LnClamped(x, eps) => {
                let eps = *eps;
                let d = g
                    .zip_map(val(*x), |gv, xv| if xv > eps { gv / xv } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(val(*x).shape()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let t = val(*x);
                let (r, c, w) = (t.rows(), t.cols(), g.cols());
                let mut d = Tensor::zeros(t.shape());
                for i in 0..r {
                    d.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        let d = g.slice_cols(off, off + w).unwrap();
                        let d = d.reshape(val(*p).shape()).unwrap();
                        self.accumulate(grads, *p, d);
                    }
                    off += w;
                }
            }
            Op::MeanRowGroups(x, group) => {
                let t = val(*x);
                let (r, n) = (t.rows(), t.cols());
                let inv = 1.0 / *group as f64;
                let mut d = vec![0.0; r * n];
                for i in 0..r {
                    for (dv, &gv) in d[i * n..(i + 1) * n].iter_mut().zip(g.row(i / group)) {
                        *dv = gv * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::MeanCols(x) => {
                let t = val(*x);
                let (r, n) = (t.rows(), t.cols());
                let mut d = vec![0.0; r * n];
                for i in 0..r {
                    let gv = g.data()[i] / n as f64;
                    d[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmaxRows(x) => {
                // d/dx_j = g_j - softmax_j * sum(g)
                let out = &node.value;
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gs: f64 = g.row(i).iter().sum();
                    for j in 0..n {
                        d[i * n + j] = g.row(i)[j] - out.row(i)[j].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::BatchNorm { x, inv_std } => {
                let xhat = &node.value;
                let (m, n) = (xhat.rows(), xhat.cols());
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        sum_g[j] += g.row(i)[j];
                        sum_gx[j] += g.row(i)[j] * xhat.row(i)[j];
                    }
                }
                let mf = m as f64;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = inv_std[j] / mf
                            * (mf * g.row(i)[j] - sum_g[j] - xhat.row(i)[j] * sum_gx[j]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), d).unwrap());
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    cosine_backward(
                        ta.row(i),
                        tb.row(i),
                        gi,
                        &mut da[i * n..(i + 1) * n],
                        &mut db[i * n..(i + 1) * n],
                    );
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::CosineGram(a) => {
                let t = val(*a);
                let (m, n) = (t.rows(), t.cols());
                let mut d = vec![0.0; m * n];
                let mut gi_buf = vec![0.0; n];
                let mut gj_buf = vec![0.0; n];
                for i in 0..m {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        gi_buf.iter_mut().for_each(|v| *v = 0.0);
                        gj_buf.iter_mut().for_each(|v| *v = 0.0);
                        cosine_backward(t.row(i), t.row(j), gij, &mut gi_buf, &mut gj_buf);
                        for k in 0..n {
                            d[i * n + k] += gi_buf[k];
                            d[j * n + k] += gj_buf[k];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
        }
    }
}

/// Returns `(cosine, dot, |a|, |b|)` with the ε-guarded denominator.
pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb + EPS_NORM), dot, na, nb)
}

/// Adds `g · ∂cos(a,b)/∂a` into `da` and `g · ∂cos(a,b)/∂b` into `db`.
fn cosine_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let (_, dot, na, nb) = cosine_parts(a, b);
    let den = na * nb + EPS_NORM;
    let inv = 1.0 / den;
    let t = dot / (den * den);
    let ca = if na > 0.0 { t * nb / na } else { 0.0 };
    let cb = if nb > 0.0 { t * na / nb } else { 0.0 };
    for k in 0..a.len() {
        da[k] += g * (b[k] * inv - ca * a[k]);
        db[k] += g * (a[k] * inv - cb * b[k]);
    }
}
