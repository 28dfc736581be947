//! Scaled dot-product multi-head attention, built from tape primitives so
//! gradients come for free.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learned projections of one attention layer: query/key/value maps plus the
/// output map, each `d x d` with a bias row.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl AttentionParams {
    pub fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let mut w = || {
            Tensor::matrix(d, d, (0..d * d).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        Ok(AttentionParams {
            heads,
            wq: w(),
            bq: Tensor::zeros(vec![d]),
            wk: w(),
            bk: Tensor::zeros(vec![d]),
            wv: w(),
            bv: Tensor::zeros(vec![d]),
            wo: w(),
            bo: Tensor::zeros(vec![d]),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

/// Tape-resident handles to one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn bind(tape: &mut Tape, p: &AttentionParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        AttentionVars {
            heads: p.heads,
            wq: leaf(&p.wq),
            bq: leaf(&p.bq),
            wk: leaf(&p.wk),
            bk: leaf(&p.bk),
            wv: leaf(&p.wv),
            bv: leaf(&p.bv),
            wo: leaf(&p.wo),
            bo: leaf(&p.bo),
        }
    }
}

/// Attention(q, k, v): project, split into heads, softmax over scaled scores,
/// concatenate heads, project out. Queries and keys may have different row
/// counts; the output has one row per query.
pub fn multi_head_attention_traced(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let d = tape.value(p.wq).rows();
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        if tape.value(x).cols() != d {
            return Err(Error::Dimension(format!(
                "{name} width {} does not match model width {d}",
                tape.value(x).cols()
            )));
        }
    }
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::Dimension("key/value row counts disagree".into()));
    }
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = tape.matmul(q, p.wq)?;
    let qp = tape.add_row_bias(qp, p.bq)?;
    let kp = tape.matmul(k, p.wk)?;
    let kp = tape.add_row_bias(kp, p.bk)?;
    let vp = tape.matmul(v, p.wv)?;
    let vp = tape.add_row_bias(vp, p.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(qp, from, to);
        let kh = tape.slice_cols(kp, from, to);
        let vh = tape.slice_cols(vp, from, to);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let cat = tape.concat_cols(&head_outputs);
    let out = tape.matmul(cat, p.wo)?;
    tape.add_row_bias(out, p.bo)
}

/// Untaped convenience wrapper over the traced builder.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let vars = AttentionVars::bind(&mut tape, p, false);
    let out = multi_head_attention_traced(&mut tape, qv, kv, vv, &vars)?;
    Ok(tape.value(out).clone())
}
