//! The non-autoregressive recognizer.
//!
//! Two branches share one acoustic encoder. The CTC branch scores every frame
//! against the vocabulary. The linguistic branch converts the frame sequence
//! into exactly `L` token-level embeddings by attending positional queries
//! over the acoustic states, re-embeds the resulting soft token distribution,
//! runs a small bidirectional language model over it, and fuses both logit
//! streams. All positions decode in parallel; no step conditions on previous
//! output tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention_traced, AttentionParams, Tape, Tensor, Var};

mod params;

pub use params::{
    BlockParams, BlockVars, FreezeMask, LinearParams, LinearVars, ModelParams, ModelVars,
};

/// Static model dimensions. `vocab_size` counts every column of the logit
/// matrices, reserved tokens included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_blocks: usize,
    pub lm_blocks: usize,
    pub vocab_size: usize,
    /// Weight on the linguistic logits in the fused stream.
    pub fusion_weight: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.feature_dim == 0 || self.width == 0 || self.ff_hidden == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab size {} below the reserved minimum of 4",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Toy dimensions that train on a laptop CPU in minutes.
    pub fn toy(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            width: 64,
            heads: 4,
            ff_hidden: 128,
            encoder_blocks: 2,
            lm_blocks: 2,
            vocab_size,
            fusion_weight: 0.3,
        }
    }
}

/// Every intermediate a decoder or loss needs, captured from one forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Frame-level acoustic states, `T x d`.
    pub acoustic: Tensor,
    /// CTC branch logits, `T x V`.
    pub frame_logits: Tensor,
    /// Positional queries driving the conversion, `L x d`.
    pub positional_query: Tensor,
    /// Token-level acoustic embedding after conversion, `L x d`.
    pub converted: Tensor,
    /// Preliminary token logits straight off the conversion, `L x V`.
    pub prelim_logits: Tensor,
    /// Row-softmax of the preliminary logits, `L x V`.
    pub conversion_weights: Tensor,
    /// Soft re-embedding into the language model space, `L x d`.
    pub linguistic_embed: Tensor,
    /// Language-model logits, `L x V`.
    pub lm_logits: Tensor,
    /// Fused output logits, `L x V`.
    pub fused_logits: Tensor,
}

impl ForwardTrace {
    pub fn token_len(&self) -> usize {
        self.fused_logits.rows()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_logits.rows()
    }

    /// Trace-wide sanity: finite dense values and conversion rows on the
    /// simplex.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("acoustic", &self.acoustic),
            ("frame_logits", &self.frame_logits),
            ("prelim_logits", &self.prelim_logits),
            ("lm_logits", &self.lm_logits),
            ("fused_logits", &self.fused_logits),
        ] {
            if !t.all_finite() {
                return Err(Error::Contract(format!("non-finite values in {name}")));
            }
        }
        for r in 0..self.conversion_weights.rows() {
            let sum: f64 = self.conversion_weights.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "conversion weight row {r} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles mirroring [`ForwardTrace`] during training.
#[derive(Debug, Clone, Copy)]
pub struct TraceVars {
    pub acoustic: Var,
    pub frame_logits: Var,
    pub positional_query: Var,
    pub converted: Var,
    pub prelim_logits: Var,
    pub conversion_weights: Var,
    pub linguistic_embed: Var,
    pub lm_logits: Var,
    pub fused_logits: Var,
}

impl TraceVars {
    pub fn materialize(&self, tape: &Tape) -> ForwardTrace {
        ForwardTrace {
            acoustic: tape.value(self.acoustic).clone(),
            frame_logits: tape.value(self.frame_logits).clone(),
            positional_query: tape.value(self.positional_query).clone(),
            converted: tape.value(self.converted).clone(),
            prelim_logits: tape.value(self.prelim_logits).clone(),
            conversion_weights: tape.value(self.conversion_weights).clone(),
            linguistic_embed: tape.value(self.linguistic_embed).clone(),
            lm_logits: tape.value(self.lm_logits).clone(),
            fused_logits: tape.value(self.fused_logits).clone(),
        }
    }
}

/// Sinusoidal position table: row `pos` holds
/// `sin(pos / 10000^(2i/d))` and `cos(pos / 10000^(2i/d))` interleaved.
pub fn positional_embedding(len: usize, dim: usize) -> Result<Tensor> {
    if len == 0 || dim == 0 {
        return Err(Error::Argument(format!(
            "positional table needs positive extent, got {len} x {dim}"
        )));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + dim - 1] = (pos as f64 * rate).sin();
        }
    }
    Tensor::matrix(len, dim, data)
}

/// One pre-norm self-attention + feed-forward block with residuals.
fn block_traced(tape: &mut Tape, x: Var, b: &BlockVars) -> Result<Var> {
    let normed = tape.layer_norm(x, b.ln_attn_gamma, b.ln_attn_beta)?;
    let attn = multi_head_attention_traced(tape, normed, normed, normed, &b.attn)?;
    let x = tape.add(x, attn)?;
    let normed = tape.layer_norm(x, b.ln_ff_gamma, b.ln_ff_beta)?;
    let h = tape.matmul(normed, b.ff1.w)?;
    let h = tape.add_row_bias(h, b.ff1.b)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, b.ff2.w)?;
    let h = tape.add_row_bias(h, b.ff2.b)?;
    tape.add(x, h)
}

fn affine(tape: &mut Tape, x: Var, lin: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, lin.w)?;
    tape.add_row_bias(y, lin.b)
}

static FORWARD_PASSES: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Process-wide count of encoder invocations, the unit of "one forward pass".
/// Monotonic; callers measure deltas. Every model run, training or inference,
/// goes through the encoder, so a decoder that secretly re-ran the model
/// would show up here.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(std::sync::atomic::Ordering::Relaxed)
}

/// Acoustic encoder: frame projection, positions, `encoder_blocks` blocks,
/// final norm. Output is `T x d`.
pub fn encode_traced(tape: &mut Tape, features: Var, m: &ModelVars) -> Result<Var> {
    FORWARD_PASSES.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let t = tape.value(features).rows();
    let d = tape.value(m.frame_proj.w).cols();
    let mut x = affine(tape, features, &m.frame_proj)?;
    let pe = tape.constant(positional_embedding(t, d)?);
    x = tape.add(x, pe)?;
    for b in &m.enc_blocks {
        x = block_traced(tape, x, b)?;
    }
    tape.layer_norm(x, m.enc_norm_gamma, m.enc_norm_beta)
}

/// CTC branch: per-frame vocabulary logits off the acoustic states. Raw
/// logits; consumers apply log-softmax.
pub fn ctc_branch_traced(tape: &mut Tape, acoustic: Var, m: &ModelVars) -> Result<Var> {
    affine(tape, acoustic, &m.ctc_head)
}

/// From acoustic states to the fused logits for a fixed token count `len`.
/// Crate-visible so the inference pipeline can reuse one utterance's
/// acoustic states after reading the predicted length off the CTC branch.
pub(crate) fn linguistic_traced(
    tape: &mut Tape,
    acoustic: Var,
    frame_logits: Var,
    len: usize,
    m: &ModelVars,
) -> Result<TraceVars> {
    let d = tape.value(m.conversion_proj).rows();
    // Positional queries attend over the acoustic states; the output length
    // is exactly the query count, which is how the frame axis becomes the
    // token axis.
    let positional_query = tape.constant(positional_embedding(len, d)?);
    let converted =
        multi_head_attention_traced(tape, positional_query, acoustic, acoustic, &m.conv_attn)?;
    let prelim_logits = tape.matmul(converted, m.conversion_proj)?;
    let conversion_weights = tape.softmax_rows(prelim_logits);
    // Soft embedding: expected LM token embedding under the conversion
    // weights.
    let linguistic_embed = tape.matmul(conversion_weights, m.lm_embed)?;
    let lm_logits = lm_stack(tape, linguistic_embed, len, m)?;
    // Fused stream: weighted linguistic logits plus the preliminary ones.
    let scaled = tape.scale(lm_logits, m.fusion_weight);
    let fused_logits = tape.add(scaled, prelim_logits)?;
    Ok(TraceVars {
        acoustic,
        frame_logits,
        positional_query,
        converted,
        prelim_logits,
        conversion_weights,
        linguistic_embed,
        lm_logits,
        fused_logits,
    })
}

/// Positional encoding, the language-model blocks, final norm, and the
/// output head, applied to an already-embedded `len x d` sequence.
fn lm_stack(tape: &mut Tape, embedded: Var, len: usize, m: &ModelVars) -> Result<Var> {
    let d = tape.value(m.conversion_proj).rows();
    let pe = tape.constant(positional_embedding(len, d)?);
    let mut x = tape.add(embedded, pe)?;
    for b in &m.lm_blocks {
        x = block_traced(tape, x, b)?;
    }
    let x = tape.layer_norm(x, m.lm_norm_gamma, m.lm_norm_beta)?;
    affine(tape, x, &m.out_head)
}

/// Language-model logits for a hard token-id sequence (embedding lookup
/// instead of the conversion's soft embedding). Drives masked pretraining.
pub fn lm_logits_from_ids_traced(
    tape: &mut Tape,
    ids: &[crate::vocab::TokenId],
    m: &ModelVars,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Argument("token sequence must be nonempty".into()));
    }
    let vocab = tape.value(m.lm_embed).rows();
    if let Some(bad) = ids.iter().find(|t| t.0 >= vocab) {
        return Err(Error::Argument(format!(
            "token id {bad} outside the {vocab}-entry embedding table"
        )));
    }
    let rows: Vec<usize> = ids.iter().map(|t| t.0).collect();
    let embedded = tape.gather_rows(m.lm_embed, &rows);
    lm_stack(tape, embedded, ids.len(), m)
}

/// Full forward pass with a caller-fixed token count (training uses the
/// reference length). `token_len` must be at least 1; the inference pipeline
/// handles the length-0 case by skipping the linguistic branch.
pub fn forward_traced(
    tape: &mut Tape,
    features: Var,
    token_len: usize,
    m: &ModelVars,
) -> Result<TraceVars> {
    if token_len == 0 {
        return Err(Error::Argument("forward needs a positive token count".into()));
    }
    let acoustic = encode_traced(tape, features, m)?;
    let frame_logits = ctc_branch_traced(tape, acoustic, m)?;
    linguistic_traced(tape, acoustic, frame_logits, token_len, m)
}

/// Untaped forward pass; validates the trace before handing it out.
pub fn forward(params: &ModelParams, features: &Tensor, token_len: usize) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.bind(&mut tape, &params::FreezeMask::all_frozen());
    let tv = forward_traced(&mut tape, f, token_len, &vars)?;
    let trace = tv.materialize(&tape);
    trace.validate()?;
    Ok(trace)
}

/// Model parameter construction with seeded Gaussian init.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(config, &mut rng)
}

pub(crate) fn gaussian_matrix(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub(crate) fn attention_params(
    d: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionParams> {
    AttentionParams::new(d, heads, rng)
}
