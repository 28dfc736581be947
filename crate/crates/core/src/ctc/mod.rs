//! Connectionist temporal classification: alignment-marginalizing loss,
//! greedy decoding, and label-synchronous prefix scoring.

mod brute;
mod prefix;

pub use brute::{brute_force_complete, brute_force_prefix};
pub use prefix::{PrefixScorer, PrefixState};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var};
use crate::vocab::TokenId;

/// Per-frame token log-probabilities, `T x V`, every row log-normalized.
#[derive(Debug, Clone)]
pub struct FrameLogProbs {
    inner: Tensor,
}

impl FrameLogProbs {
    /// Validates that exp of every row sums to one within 1e-9.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.shape().len() != 2 {
            return Err(Error::Dimension("frame log-probs must be rank 2".into()));
        }
        for r in 0..log_probs.rows() {
            let sum: f64 = log_probs.row(r).iter().map(|&x| x.exp()).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!(
                    "frame {r} log-probs sum to {sum}, not 1"
                )));
            }
        }
        Ok(FrameLogProbs { inner: log_probs })
    }

    /// Log-softmax of raw frame logits.
    pub fn from_logits(frame_logits: &Tensor) -> Result<Self> {
        if frame_logits.shape().len() != 2 {
            return Err(Error::Dimension("frame logits must be rank 2".into()));
        }
        Ok(FrameLogProbs { inner: log_softmax_rows(frame_logits) })
    }

    pub fn frames(&self) -> usize {
        self.inner.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.cols()
    }

    pub fn lp(&self, t: usize, token: TokenId) -> f64 {
        self.inner.at(t, token.0)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.inner
    }
}

/// Merges adjacent duplicates, then removes blanks.
pub fn collapse(alignment: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev: Option<TokenId> = None;
    for &sym in alignment {
        if prev != Some(sym) && sym != blank {
            out.push(sym);
        }
        prev = Some(sym);
    }
    out
}

/// Per-frame argmax (ties to the lowest id), collapsed. Returns the token
/// sequence and its length.
pub fn ctc_greedy(frame_logits: &Tensor, blank: TokenId) -> (Vec<TokenId>, usize) {
    let mut alignment = Vec::with_capacity(frame_logits.rows());
    for r in 0..frame_logits.rows() {
        let row = frame_logits.row(r);
        let mut best = 0usize;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        alignment.push(TokenId(best));
    }
    let tokens = collapse(&alignment, blank);
    let len = tokens.len();
    (tokens, len)
}

/// Minimal frame count that can carry `target`: one frame per label plus a
/// separating blank per adjacent repeat.
fn min_frames(target: &[TokenId]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check_ctc_target(frame_count: usize, vocab: usize, target: &[TokenId], blank: TokenId) -> Result<()> {
    for &t in target {
        if t == blank {
            return Err(Error::Argument("CTC target contains the blank".into()));
        }
        if t.0 >= vocab {
            return Err(Error::Argument(format!(
                "target id {} outside the {vocab}-column alphabet",
                t.0
            )));
        }
    }
    if frame_count < min_frames(target) {
        return Err(Error::Infeasible(format!(
            "{frame_count} frames cannot carry a target needing {}",
            min_frames(target)
        )));
    }
    Ok(())
}

/// Negative log-probability of `target` under the standard blank-interleaved
/// forward recursion, built on the tape so gradients reach the logits.
///
/// `frame_logits` are raw logits; log-softmax happens inside.
pub fn ctc_loss_traced(
    tape: &mut Tape,
    frame_logits: Var,
    target: &[TokenId],
    blank: TokenId,
) -> Result<Var> {
    let (t_len, vocab) = {
        let t = tape.value(frame_logits);
        (t.rows(), t.cols())
    };
    check_ctc_target(t_len, vocab, target, blank)?;
    let lp = tape.log_softmax_rows(frame_logits);

    if target.is_empty() {
        if t_len == 0 {
            return Ok(tape.scalar(0.0));
        }
        // Only the all-blank path survives.
        let entries: Vec<(usize, usize)> = (0..t_len).map(|t| (t, blank.0)).collect();
        let picked = tape.pick_entries(lp, &entries);
        let mean = tape.mean_all(picked);
        return Ok(tape.scale(mean, -(t_len as f64)));
    }

    // States 0..=2L: even = blank, odd s = label (s-1)/2.
    let n_states = 2 * target.len() + 1;
    let sym = |s: usize| -> TokenId {
        if s % 2 == 0 {
            blank
        } else {
            target[(s - 1) / 2]
        }
    };
    let neg_inf = tape.scalar(f64::NEG_INFINITY);

    // One pick node per (frame, referenced column).
    let mut pick_cache: Vec<Option<Var>> = vec![None; vocab];
    let pick = |tape: &mut Tape, t: usize, tok: TokenId, cache: &mut Vec<Option<Var>>| {
        *cache[tok.0].get_or_insert_with(|| tape.pick(lp, t, tok.0))
    };

    let mut prev: Vec<Var> = vec![neg_inf; n_states];
    for t in 0..t_len {
        pick_cache.iter_mut().for_each(|c| *c = None);
        let mut cur = vec![neg_inf; n_states];
        for s in 0..n_states {
            let mut sources = vec![prev[s], if s >= 1 { prev[s - 1] } else { neg_inf }];
            // A label may skip the preceding blank unless it would merge with
            // an identical earlier label.
            if s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2) {
                sources.push(prev[s - 2]);
            }
            if t == 0 {
                // Paths start in state 0 or 1 only.
                if s > 1 {
                    continue;
                }
                sources = vec![tape.scalar(0.0)];
            }
            let gathered = tape.lse_scalars(&sources)?;
            let emit = pick(&mut *tape, t, sym(s), &mut pick_cache);
            cur[s] = tape.add(gathered, emit)?;
        }
        prev = cur;
    }
    let tail = tape.lse_scalars(&[prev[n_states - 1], prev[n_states - 2]])?;
    Ok(tape.scale(tail, -1.0))
}

/// Untaped wrapper for scoring without gradients.
pub fn ctc_loss(frame_logits: &Tensor, target: &[TokenId], blank: TokenId) -> Result<f64> {
    let mut tape = Tape::new();
    let fl = tape.constant(frame_logits.clone());
    let loss = ctc_loss_traced(&mut tape, fl, target, blank)?;
    Ok(tape.value(loss).item())
}
