//! Parameter containers, traversal, and tape binding.

use rand_chacha::ChaCha8Rng;

use super::{attention_params, gaussian_matrix, ModelConfig};
use crate::error::Result;
use crate::tensor::{AttentionParams, AttentionVars, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            w: gaussian_matrix(rows, cols, 1.0 / (rows as f64).sqrt(), rng),
            b: Tensor::zeros(vec![cols]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln_attn_gamma: Tensor,
    pub ln_attn_beta: Tensor,
    pub attn: AttentionParams,
    pub ln_ff_gamma: Tensor,
    pub ln_ff_beta: Tensor,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

impl BlockParams {
    fn init(d: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BlockParams {
            ln_attn_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln_attn_beta: Tensor::zeros(vec![d]),
            attn: attention_params(d, heads, rng)?,
            ln_ff_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln_ff_beta: Tensor::zeros(vec![d]),
            ff1: LinearParams::init(d, ff, rng),
            ff2: LinearParams::init(ff, d, rng),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln_attn_gamma: Var,
    pub ln_attn_beta: Var,
    pub attn: AttentionVars,
    pub ln_ff_gamma: Var,
    pub ln_ff_beta: Var,
    pub ff1: LinearVars,
    pub ff2: LinearVars,
}

/// Which parameter groups a tape binding should exclude from gradients.
/// `encoder` covers the acoustic stack, `lm` the language-model stack
/// (embedding included); `rest` covers the heads and the conversion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeMask {
    pub encoder: bool,
    pub lm: bool,
    pub rest: bool,
}

impl FreezeMask {
    /// Everything trainable.
    pub fn none() -> Self {
        FreezeMask { encoder: false, lm: false, rest: false }
    }

    /// Inference binding: no gradients anywhere.
    pub fn all_frozen() -> Self {
        FreezeMask { encoder: true, lm: true, rest: true }
    }

    /// True when the named parameter belongs to a frozen group.
    pub fn freezes(&self, name: &str) -> bool {
        if name.starts_with("enc.") || name.starts_with("enc_norm.") || name.starts_with("frame_proj.") {
            self.encoder
        } else if name.starts_with("lm.") || name.starts_with("lm_norm.") || name == "lm_embed" {
            self.lm
        } else {
            self.rest
        }
    }
}

/// All trainable tensors of the recognizer plus its static dimensions.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub frame_proj: LinearParams,
    pub enc_blocks: Vec<BlockParams>,
    pub enc_norm_gamma: Tensor,
    pub enc_norm_beta: Tensor,
    pub ctc_head: LinearParams,
    pub conv_attn: AttentionParams,
    /// Token classifier over the converted embedding, `d x V`, no bias.
    pub conversion_proj: Tensor,
    /// Language-model token embedding table, `V x d`.
    pub lm_embed: Tensor,
    pub lm_blocks: Vec<BlockParams>,
    pub lm_norm_gamma: Tensor,
    pub lm_norm_beta: Tensor,
    pub out_head: LinearParams,
}

impl ModelParams {
    pub(super) fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, v, ff) = (config.width, config.vocab_size, config.ff_hidden);
        let enc_blocks = (0..config.encoder_blocks)
            .map(|_| BlockParams::init(d, config.heads, ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let lm_blocks = (0..config.lm_blocks)
            .map(|_| BlockParams::init(d, config.heads, ff, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config: config.clone(),
            frame_proj: LinearParams::init(config.feature_dim, d, rng),
            enc_blocks,
            enc_norm_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            enc_norm_beta: Tensor::zeros(vec![d]),
            ctc_head: LinearParams::init(d, v, rng),
            conv_attn: attention_params(d, config.heads, rng)?,
            conversion_proj: gaussian_matrix(d, v, 1.0 / (d as f64).sqrt(), rng),
            lm_embed: gaussian_matrix(v, d, 1.0 / (d as f64).sqrt(), rng),
            lm_blocks,
            lm_norm_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            lm_norm_beta: Tensor::zeros(vec![d]),
            out_head: LinearParams::init(d, v, rng),
        })
    }

    /// Visits every tensor with a stable, code-ordered name. Checkpoints and
    /// the optimizer both key off this order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        let mut cloned = self.clone();
        cloned.visit_mut(&mut |name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        fn linear(name: &str, l: &mut LinearParams, f: &mut impl FnMut(&str, &mut Tensor)) {
            f(&format!("{name}.w"), &mut l.w);
            f(&format!("{name}.b"), &mut l.b);
        }
        fn attn(name: &str, a: &mut AttentionParams, f: &mut impl FnMut(&str, &mut Tensor)) {
            f(&format!("{name}.wq"), &mut a.wq);
            f(&format!("{name}.bq"), &mut a.bq);
            f(&format!("{name}.wk"), &mut a.wk);
            f(&format!("{name}.bk"), &mut a.bk);
            f(&format!("{name}.wv"), &mut a.wv);
            f(&format!("{name}.bv"), &mut a.bv);
            f(&format!("{name}.wo"), &mut a.wo);
            f(&format!("{name}.bo"), &mut a.bo);
        }
        fn block(name: &str, b: &mut BlockParams, f: &mut impl FnMut(&str, &mut Tensor)) {
            f(&format!("{name}.ln_attn.gamma"), &mut b.ln_attn_gamma);
            f(&format!("{name}.ln_attn.beta"), &mut b.ln_attn_beta);
            attn(&format!("{name}.attn"), &mut b.attn, f);
            f(&format!("{name}.ln_ff.gamma"), &mut b.ln_ff_gamma);
            f(&format!("{name}.ln_ff.beta"), &mut b.ln_ff_beta);
            linear(&format!("{name}.ff1"), &mut b.ff1, f);
            linear(&format!("{name}.ff2"), &mut b.ff2, f);
        }
        linear("frame_proj", &mut self.frame_proj, f);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            block(&format!("enc.{i}"), b, f);
        }
        f("enc_norm.gamma", &mut self.enc_norm_gamma);
        f("enc_norm.beta", &mut self.enc_norm_beta);
        linear("ctc_head", &mut self.ctc_head, f);
        attn("conv_attn", &mut self.conv_attn, f);
        f("conversion_proj", &mut self.conversion_proj);
        f("lm_embed", &mut self.lm_embed);
        for (i, b) in self.lm_blocks.iter_mut().enumerate() {
            block(&format!("lm.{i}"), b, f);
        }
        f("lm_norm.gamma", &mut self.lm_norm_gamma);
        f("lm_norm.beta", &mut self.lm_norm_beta);
        linear("out_head", &mut self.out_head, f);
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    #[cfg(test)]
    pub(crate) fn zero_all(&mut self) {
        self.visit_mut(&mut |_, t| {
            for x in t.data_mut() {
                *x = 0.0;
            }
        });
    }

    /// Inserts every tensor into `tape`; groups the mask freezes become
    /// constants, the rest gradient-carrying leaves.
    pub fn bind(&self, tape: &mut Tape, freeze: &FreezeMask) -> ModelVars {
        fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        }
        let lin = |tape: &mut Tape, l: &LinearParams, trainable: bool| LinearVars {
            w: leaf(tape, &l.w, trainable),
            b: leaf(tape, &l.b, trainable),
        };
        let attn = |tape: &mut Tape, a: &AttentionParams, trainable: bool| {
            AttentionVars::bind(tape, a, trainable)
        };
        let block = |tape: &mut Tape, b: &BlockParams, trainable: bool| BlockVars {
            ln_attn_gamma: leaf(tape, &b.ln_attn_gamma, trainable),
            ln_attn_beta: leaf(tape, &b.ln_attn_beta, trainable),
            attn: attn(tape, &b.attn, trainable),
            ln_ff_gamma: leaf(tape, &b.ln_ff_gamma, trainable),
            ln_ff_beta: leaf(tape, &b.ln_ff_beta, trainable),
            ff1: lin(tape, &b.ff1, trainable),
            ff2: lin(tape, &b.ff2, trainable),
        };
        let enc_train = !freeze.encoder;
        let lm_train = !freeze.lm;
        let rest_train = !freeze.rest;
        ModelVars {
            frame_proj: lin(tape, &self.frame_proj, enc_train),
            enc_blocks: self.enc_blocks.iter().map(|b| block(tape, b, enc_train)).collect(),
            enc_norm_gamma: leaf(tape, &self.enc_norm_gamma, enc_train),
            enc_norm_beta: leaf(tape, &self.enc_norm_beta, enc_train),
            ctc_head: lin(tape, &self.ctc_head, rest_train),
            conv_attn: attn(tape, &self.conv_attn, rest_train),
            conversion_proj: leaf(tape, &self.conversion_proj, rest_train),
            lm_embed: leaf(tape, &self.lm_embed, lm_train),
            lm_blocks: self.lm_blocks.iter().map(|b| block(tape, b, lm_train)).collect(),
            lm_norm_gamma: leaf(tape, &self.lm_norm_gamma, lm_train),
            lm_norm_beta: leaf(tape, &self.lm_norm_beta, lm_train),
            out_head: lin(tape, &self.out_head, rest_train),
            fusion_weight: self.config.fusion_weight,
        }
    }

    /// Tape handles in the same traversal order as [`ModelParams::visit`],
    /// for pairing gradients with parameters by name.
    pub fn var_list(vars: &ModelVars) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Var)>, name: &str, l: &LinearVars| {
            out.push((format!("{name}.w"), l.w));
            out.push((format!("{name}.b"), l.b));
        };
        let attn = |out: &mut Vec<(String, Var)>, name: &str, a: &AttentionVars| {
            out.push((format!("{name}.wq"), a.wq));
            out.push((format!("{name}.bq"), a.bq));
            out.push((format!("{name}.wk"), a.wk));
            out.push((format!("{name}.bk"), a.bk));
            out.push((format!("{name}.wv"), a.wv));
            out.push((format!("{name}.bv"), a.bv));
            out.push((format!("{name}.wo"), a.wo));
            out.push((format!("{name}.bo"), a.bo));
        };
        let block = |out: &mut Vec<(String, Var)>, name: &str, b: &BlockVars| {
            out.push((format!("{name}.ln_attn.gamma"), b.ln_attn_gamma));
            out.push((format!("{name}.ln_attn.beta"), b.ln_attn_beta));
            attn(out, &format!("{name}.attn"), &b.attn);
            out.push((format!("{name}.ln_ff.gamma"), b.ln_ff_gamma));
            out.push((format!("{name}.ln_ff.beta"), b.ln_ff_beta));
            lin(out, &format!("{name}.ff1"), &b.ff1);
            lin(out, &format!("{name}.ff2"), &b.ff2);
        };
        lin(&mut out, "frame_proj", &vars.frame_proj);
        for (i, b) in vars.enc_blocks.iter().enumerate() {
            block(&mut out, &format!("enc.{i}"), b);
        }
        out.push(("enc_norm.gamma".into(), vars.enc_norm_gamma));
        out.push(("enc_norm.beta".into(), vars.enc_norm_beta));
        lin(&mut out, "ctc_head", &vars.ctc_head);
        attn(&mut out, "conv_attn", &vars.conv_attn);
        out.push(("conversion_proj".into(), vars.conversion_proj));
        out.push(("lm_embed".into(), vars.lm_embed));
        for (i, b) in vars.lm_blocks.iter().enumerate() {
            block(&mut out, &format!("lm.{i}"), b);
        }
        out.push(("lm_norm.gamma".into(), vars.lm_norm_gamma));
        out.push(("lm_norm.beta".into(), vars.lm_norm_beta));
        lin(&mut out, "out_head", &vars.out_head);
        out
    }
}

/// Tape-resident mirror of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub frame_proj: LinearVars,
    pub enc_blocks: Vec<BlockVars>,
    pub enc_norm_gamma: Var,
    pub enc_norm_beta: Var,
    pub ctc_head: LinearVars,
    pub conv_attn: AttentionVars,
    pub conversion_proj: Var,
    pub lm_embed: Var,
    pub lm_blocks: Vec<BlockVars>,
    pub lm_norm_gamma: Var,
    pub lm_norm_beta: Var,
    pub out_head: LinearVars,
    pub fusion_weight: f64,
}
