//! End-to-end inference: one forward pass per utterance feeds both decode
//! modes.
//!
//! [`infer`] runs the model once — encoder, CTC branch, and (when the CTC
//! greedy length is positive) the linguistic branch reusing the same acoustic
//! states — and returns everything decoding needs. Decoders work off that
//! [`Inference`] alone; they have no access to the parameters, so re-running
//! the model mid-search is impossible by construction.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::ctc::{ctc_greedy, FrameLogProbs};
use crate::decoder::{joint_decode, DecodeConfig, ScoreCache};
use crate::error::{Error, Result};
use crate::model::{
    ctc_branch_traced, encode_traced, forward_pass_count, linguistic_traced, FreezeMask,
    ModelParams,
};
use crate::tensor::{Tape, Tensor};
use crate::vocab::{TokenId, Vocabulary};

/// Everything decoding needs from one utterance's single forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub frame_log_probs: FrameLogProbs,
    /// CTC greedy length estimate; also the cache's row count.
    pub l_hat: usize,
    pub cache: ScoreCache,
}

/// Runs the model once over `features` (frames x feature_dim).
pub fn infer(params: &ModelParams, features: &Tensor) -> Result<Inference> {
    if features.rows() == 0 {
        return Err(Error::Argument("utterance has no frames".into()));
    }
    if features.cols() != params.config.feature_dim {
        return Err(Error::Dimension(format!(
            "features have dim {}, model expects {}",
            features.cols(),
            params.config.feature_dim
        )));
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.bind(&mut tape, &FreezeMask::all_frozen());
    let acoustic = encode_traced(&mut tape, f, &vars)?;
    let frame_logits = ctc_branch_traced(&mut tape, acoustic, &vars)?;
    let frame_log_probs = FrameLogProbs::from_logits(tape.value(frame_logits))?;
    let (greedy, l_hat) = ctc_greedy(frame_log_probs.tensor(), TokenId(0));
    debug_assert_eq!(greedy.len(), l_hat);
    let cache = if l_hat == 0 {
        ScoreCache::empty(params.config.vocab_size)
    } else {
        let tv = linguistic_traced(&mut tape, acoustic, frame_logits, l_hat, &vars)?;
        ScoreCache::from_fused_logits(tape.value(tv.fused_logits), l_hat)?
    };
    Ok(Inference { frame_log_probs, l_hat, cache })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Joint,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "joint" => Ok(DecodeMode::Joint),
            other => Err(Error::Argument(format!(
                "decode mode must be \"greedy\" or \"joint\", got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Joint => "joint",
        })
    }
}

/// Greedy hypothesis: per-position argmax of the cached fused rows over the
/// real tokens only — blank, unk, and eos are not output symbols. Ties take
/// the lowest id.
pub fn greedy_tokens(inference: &Inference, vocab: &Vocabulary) -> Vec<TokenId> {
    let lp = inference.cache.att_log_probs();
    (0..inference.cache.l_hat())
        .map(|l| {
            let mut best = vocab.unk();
            let mut best_score = f64::NEG_INFINITY;
            for c in vocab.real_ids() {
                let s = lp.at(l, c.0);
                if s > best_score {
                    best_score = s;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Decodes one already-inferred utterance in the requested mode.
pub fn decode_utterance(
    inference: &Inference,
    vocab: &Vocabulary,
    mode: DecodeMode,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    if inference.cache.att_log_probs().cols() != vocab.size() {
        return Err(Error::Contract(format!(
            "cache has {} columns but the vocabulary {} tokens",
            inference.cache.att_log_probs().cols(),
            vocab.size()
        )));
    }
    match mode {
        DecodeMode::Greedy => Ok(greedy_tokens(inference, vocab)),
        DecodeMode::Joint => {
            joint_decode(&inference.frame_log_probs, &inference.cache, vocab, cfg)
                .map(|o| o.tokens)
        }
    }
}

/// Infers and decodes a whole corpus in parallel, preserving input order.
/// Per-utterance work is independent, so results are identical to a serial
/// run regardless of thread count.
pub fn decode_corpus(
    params: &ModelParams,
    features: &[Tensor],
    vocab: &Vocabulary,
    mode: DecodeMode,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<TokenId>>> {
    if params.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            params.config.vocab_size,
            vocab.size()
        )));
    }
    features
        .par_iter()
        .map(|f| {
            let inference = infer(params, f)?;
            decode_utterance(&inference, vocab, mode, cfg)
        })
        .collect()
}

/// Renders a token sequence as a transcript line.
pub fn tokens_to_line(vocab: &Vocabulary, tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| vocab.token(*t)).collect::<Vec<_>>().join(" ")
}

/// Wall-time comparison of the two decode modes over one corpus.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub utterances: usize,
    pub greedy_total_s: f64,
    pub joint_total_s: f64,
    /// joint / greedy wall time.
    pub ratio: f64,
    /// Encoder invocations during each mode's loop. Meaningful when nothing
    /// else runs the model concurrently; each should equal `utterances`.
    pub greedy_forward_passes: u64,
    pub joint_forward_passes: u64,
}

/// Times both modes single-threaded over the same utterances, inference
/// included: that is the per-utterance cost a caller actually pays.
pub fn bench_decode(
    params: &ModelParams,
    features: &[Tensor],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<BenchReport> {
    if features.is_empty() {
        return Err(Error::Argument("nothing to bench".into()));
    }
    let passes_start = forward_pass_count();
    let t0 = Instant::now();
    for f in features {
        let inference = infer(params, f)?;
        decode_utterance(&inference, vocab, DecodeMode::Greedy, cfg)?;
    }
    let greedy_total_s = t0.elapsed().as_secs_f64();
    let passes_mid = forward_pass_count();
    let t1 = Instant::now();
    for f in features {
        let inference = infer(params, f)?;
        decode_utterance(&inference, vocab, DecodeMode::Joint, cfg)?;
    }
    let joint_total_s = t1.elapsed().as_secs_f64();
    let passes_end = forward_pass_count();
    Ok(BenchReport {
        utterances: features.len(),
        greedy_total_s,
        joint_total_s,
        ratio: joint_total_s / greedy_total_s,
        greedy_forward_passes: passes_mid - passes_start,
        joint_forward_passes: passes_end - passes_mid,
    })
}
