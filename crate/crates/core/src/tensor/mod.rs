//! Dense row-major tensors and the pure math kernels shared by the taped and
//! untaped execution paths.

mod attention;
mod gradcheck;
mod tape;

pub use attention::{
    multi_head_attention, multi_head_attention_traced, AttentionParams, AttentionVars,
};
pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Dense tensor of 64-bit floats, row-major.
///
/// Rank is at most 2 in practice: matrices `[rows, cols]`, vectors `[n]`,
/// scalars `[1]`. All training, oracle, and inference math runs in f64 so the
/// acceptance tolerances hold on a single numeric path.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false }
    }

    /// Matrix constructor; `data.len()` must equal `rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    /// Scalar payload of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() needs a single-element tensor");
        self.data[0]
    }

    /// True when no element is NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a · b` for rank-2 operands; inner dimensions must agree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return Err(Error::Dimension("matmul needs rank-2 operands".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims disagree: [{m}, {k}] x [{k2}, {n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    // i-k-j order keeps the inner loop streaming over contiguous rows.
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out, requires_grad: false }
}

/// Row-wise softmax with the max-shift trick; each output row sums to 1 and
/// stays finite for inputs as large as +-1e4.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = m.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor { shape: vec![rows, cols], data: out, requires_grad: false }
}

/// Row-wise log-softmax; exp of each row sums to 1 within 1e-9.
pub fn log_softmax_rows(m: &Tensor) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = m.row(r);
        let lse = log_sum_exp(row).expect("log_softmax on empty row");
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    Tensor { shape: vec![rows, cols], data: out, requires_grad: false }
}

/// log(sum(exp(v))) with max shift. All -inf inputs yield -inf (the
/// empty-probability convention); an empty slice is an argument error.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("log_sum_exp of an empty vector".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}
