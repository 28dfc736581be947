//! Wengert-list reverse-mode differentiation.
//!
//! A `Tape` is an append-only arena of nodes; `Var` is an index into it.
//! Because every operation is recorded after its inputs, walking the list in
//! reverse index order visits ops in reverse topological order, which is all
//! `backward` needs.

use super::{log_softmax_rows, log_sum_exp, matmul, softmax_rows, transpose, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Matrix plus a bias row broadcast over every row.
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row-wise layer norm with learned gain and shift.
    LayerNorm { x: Var, gamma: Var, beta: Var },
    SliceCols { x: Var, from: usize, to: usize },
    ConcatCols(Vec<Var>),
    /// Row lookup: out[i, :] = m[ids[i], :]. Repeated ids accumulate grads.
    GatherRows { m: Var, ids: Vec<usize> },
    /// Element lookup: out[i] = m[entries[i].0, entries[i].1].
    PickEntries { m: Var, entries: Vec<(usize, usize)> },
    /// Single element as a scalar node.
    Pick { m: Var, r: usize, c: usize },
    MeanAll(Var),
    /// log-sum-exp over scalar nodes; the log-domain accumulator of the CTC
    /// dynamic program.
    LseScalars(Vec<Var>),
    /// log-sum-exp over one vector node.
    LogSumExpVec(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf that never receives gradients (inputs, positional tables, ...).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let needs = false;
        let mut t = t;
        if t.requires_grad() {
            t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
        }
        self.push(t, Op::Leaf, needs)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = transpose(self.value(x));
        let needs = self.needs(x);
        self.push(v, Op::Transpose(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add shapes disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(bias));
        if tb.shape().len() != 1 || tb.numel() != tm.cols() {
            return Err(Error::Dimension(format!(
                "row bias of {} elements against {} columns",
                tb.numel(),
                tm.cols()
            )));
        }
        let cols = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let v = Tensor::new(tm.shape().to_vec(), data).unwrap();
        let needs = self.needs(m) || self.needs(bias);
        Ok(self.push(v, Op::AddRowBias(m, bias), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let v = Tensor::new(t.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let v = Tensor::new(t.shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(v, Op::SoftmaxRows(x), needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(v, Op::LogSoftmaxRows(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Dimension(format!(
                "layer norm gain/shift of {}/{} elements against {} columns",
                tg.numel(),
                tb.numel(),
                cols
            )));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let sigma = (var + LN_EPS).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) / sigma;
                out[r * cols + j] = xhat * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(vec![rows, cols], out).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }, needs))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(from < to && to <= cols, "column slice out of range");
        let width = to - from;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[from..to]);
        }
        let v = Tensor::new(vec![rows, width], out).unwrap();
        let needs = self.needs(x);
        self.push(v, Op::SliceCols { x, from, to }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], out).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn gather_rows(&mut self, m: Var, ids: &[usize]) -> Var {
        let t = self.value(m);
        let cols = t.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            assert!(id < t.rows(), "gather row out of range");
            out.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(vec![ids.len(), cols], out).unwrap();
        let needs = self.needs(m);
        self.push(v, Op::GatherRows { m, ids: ids.to_vec() }, needs)
    }

    pub fn pick_entries(&mut self, m: Var, entries: &[(usize, usize)]) -> Var {
        let t = self.value(m);
        let data: Vec<f64> = entries.iter().map(|&(r, c)| t.at(r, c)).collect();
        let v = Tensor::new(vec![entries.len()], data).unwrap();
        let needs = self.needs(m);
        self.push(v, Op::PickEntries { m, entries: entries.to_vec() }, needs)
    }

    pub fn pick(&mut self, m: Var, r: usize, c: usize) -> Var {
        let v = Tensor::scalar(self.value(m).at(r, c));
        let needs = self.needs(m);
        self.push(v, Op::Pick { m, r, c }, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(t.numel() > 0, "mean of an empty tensor");
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let needs = self.needs(x);
        self.push(v, Op::MeanAll(x), needs)
    }

    /// log-sum-exp over scalar nodes. All -inf inputs give -inf with zero
    /// gradient everywhere.
    pub fn lse_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Argument("log_sum_exp of zero scalars".into()));
        }
        let vals: Vec<f64> = xs.iter().map(|&x| self.value(x).item()).collect();
        let v = Tensor::scalar(log_sum_exp(&vals)?);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(v, Op::LseScalars(xs.to_vec()), needs))
    }

    pub fn log_sum_exp(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let out = Tensor::scalar(log_sum_exp(t.data())?);
        let needs = self.needs(v);
        Ok(self.push(out, Op::LogSumExpVec(v), needs))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// leaves that the loss never touched read back as zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        add(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gt = Tensor::new(self.nodes[i].value.shape().to_vec(), g.to_vec()).unwrap();
                if self.needs(*a) {
                    let da = matmul(&gt, &transpose(tb)).unwrap();
                    self.accumulate(grads, *a, |s| {
                        for (x, y) in s.iter_mut().zip(da.data()) {
                            *x += y;
                        }
                    });
                }
                if self.needs(*b) {
                    let db = matmul(&transpose(ta), &gt).unwrap();
                    self.accumulate(grads, *b, |s| {
                        for (x, y) in s.iter_mut().zip(db.data()) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = {
                    let t = &self.nodes[i].value;
                    (t.rows(), t.cols())
                };
                self.accumulate(grads, *x, |s| {
                    // grad of transpose is the transpose of the grad
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c * rows + r] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |s| {
                        for (x, y) in s.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddRowBias(m, bias) => {
                self.accumulate(grads, *m, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                let cols = self.value(*bias).numel();
                self.accumulate(grads, *bias, |s| {
                    for (j, y) in g.iter().enumerate() {
                        s[j % cols] += y;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |s| {
                    for ((x, y), &v) in s.iter_mut().zip(g).zip(tx.data()) {
                        if v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            s[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            s[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (rows, cols) = (tx.rows(), tx.cols());
                // Recompute per-row statistics; cheaper than caching them for
                // every node in the graph.
                let mut xhat = vec![0.0; rows * cols];
                let mut sigma = vec![0.0; rows];
                for r in 0..rows {
                    let row = tx.row(r);
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                    sigma[r] = (var + LN_EPS).sqrt();
                    for j in 0..cols {
                        xhat[r * cols + j] = (row[j] - mean) / sigma[r];
                    }
                }
                self.accumulate(grads, *beta, |s| {
                    for r in 0..rows {
                        for j in 0..cols {
                            s[j] += g[r * cols + j];
                        }
                    }
                });
                self.accumulate(grads, *gamma, |s| {
                    for r in 0..rows {
                        for j in 0..cols {
                            s[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0; // mean of gamma*g
                        let mut m2 = 0.0; // mean of gamma*g*xhat
                        for j in 0..cols {
                            let gg = tg.data()[j] * gr[j];
                            m1 += gg;
                            m2 += gg * xr[j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let gg = tg.data()[j] * gr[j];
                            s[r * cols + j] += (gg - m1 - xr[j] * m2) / sigma[r];
                        }
                    }
                });
            }
            Op::SliceCols { x, from, to } => {
                let cols = self.value(*x).cols();
                let width = to - from;
                let rows = self.nodes[i].value.rows();
                let from = *from;
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        for j in 0..width {
                            s[r * cols + from + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    self.accumulate(grads, p, |s| {
                        for r in 0..rows {
                            for j in 0..width {
                                s[r * width + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::GatherRows { m, ids } => {
                let cols = self.value(*m).cols();
                self.accumulate(grads, *m, |s| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            s[id * cols + j] += g[row * cols + j];
                        }
                    }
                });
            }
            Op::PickEntries { m, entries } => {
                let cols = self.value(*m).cols();
                self.accumulate(grads, *m, |s| {
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        s[r * cols + c] += g[k];
                    }
                });
            }
            Op::Pick { m, r, c } => {
                let cols = self.value(*m).cols();
                self.accumulate(grads, *m, |s| s[r * cols + c] += g[0]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |s| {
                    for v in s.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::LseScalars(xs) => {
                let out = self.nodes[i].value.item();
                if out == f64::NEG_INFINITY {
                    return;
                }
                for &x in xs {
                    let xv = self.value(x).item();
                    self.accumulate(grads, x, |s| s[0] += g[0] * (xv - out).exp());
                }
            }
            Op::LogSumExpVec(v) => {
                let out = self.nodes[i].value.item();
                if out == f64::NEG_INFINITY {
                    return;
                }
                let tv = self.value(*v);
                self.accumulate(grads, *v, |s| {
                    for (x, &val) in s.iter_mut().zip(tv.data()) {
                        *x += g[0] * (val - out).exp();
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when the loss never
    /// touched it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}
