//! Exhaustive alignment enumeration. Ground truth for the loss and the
//! prefix scorer on instances small enough to enumerate all V^T alignments.

use crate::error::{Error, Result};
use crate::vocab::TokenId;

use super::{collapse, FrameLogProbs};

const MAX_FRAMES: usize = 8;
const MAX_ALPHABET: usize = 4;

fn check_size(log_probs: &FrameLogProbs) -> Result<()> {
    let (t, v) = (log_probs.frames(), log_probs.vocab_size());
    if t > MAX_FRAMES || v > MAX_ALPHABET {
        return Err(Error::Argument(format!(
            "enumeration limited to {MAX_FRAMES} frames x {MAX_ALPHABET} symbols, got {t} x {v}"
        )));
    }
    Ok(())
}

/// Sums alignment probabilities where `accept(collapse)` holds; returns ln.
fn sum_over_alignments(
    log_probs: &FrameLogProbs,
    accept: impl Fn(&[TokenId]) -> bool,
) -> Result<f64> {
    check_size(log_probs)?;
    let (t, v) = (log_probs.frames(), log_probs.vocab_size());
    let mut alignment = vec![0usize; t];
    let mut total = 0.0f64;
    loop {
        let toks: Vec<TokenId> = alignment.iter().map(|&s| TokenId(s)).collect();
        let logp: f64 = (0..t).map(|i| log_probs.lp(i, toks[i])).sum();
        if accept(&collapse(&toks, TokenId(0))) {
            total += logp.exp();
        }
        // Odometer over V^T.
        let mut i = 0;
        loop {
            if i == t {
                return Ok(total.ln());
            }
            alignment[i] += 1;
            if alignment[i] < v {
                break;
            }
            alignment[i] = 0;
            i += 1;
        }
    }
}

/// ln P(collapse of a random alignment starts with `prefix`), blank fixed at
/// column 0 by the enumeration's collapse.
pub fn brute_force_prefix(
    log_probs: &FrameLogProbs,
    prefix: &[TokenId],
    blank: TokenId,
) -> Result<f64> {
    if blank != TokenId(0) {
        return Err(Error::Argument("enumeration assumes blank at column 0".into()));
    }
    sum_over_alignments(log_probs, |c| c.len() >= prefix.len() && &c[..prefix.len()] == prefix)
}

/// ln P(collapse of a random alignment equals `target` exactly).
pub fn brute_force_complete(
    log_probs: &FrameLogProbs,
    target: &[TokenId],
    blank: TokenId,
) -> Result<f64> {
    if blank != TokenId(0) {
        return Err(Error::Argument("enumeration assumes blank at column 0".into()));
    }
    sum_over_alignments(log_probs, |c| c == target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_two_frames() {
        let lp = FrameLogProbs::from_logits(&Tensor::matrix(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        // {aa, a_, _a} of 4 alignments collapse to "a".
        let p = brute_force_complete(&lp, &[TokenId(1)], TokenId(0)).unwrap();
        assert!((p - 0.75f64.ln()).abs() < 1e-12);
        // Empty prefix accepts everything.
        let all = brute_force_prefix(&lp, &[], TokenId(0)).unwrap();
        assert!(all.abs() < 1e-12);
    }

    #[test]
    fn zero_mass_is_neg_infinity() {
        let lp = FrameLogProbs::from_logits(&Tensor::matrix(1, 2, vec![0.0; 2]).unwrap()).unwrap();
        // Two labels cannot fit in one frame.
        let p = brute_force_complete(&lp, &[TokenId(1), TokenId(1)], TokenId(0)).unwrap();
        assert_eq!(p, f64::NEG_INFINITY);
    }

    #[test]
    fn size_guard_refuses_large_instances() {
        let lp =
            FrameLogProbs::from_logits(&Tensor::matrix(9, 2, vec![0.0; 18]).unwrap()).unwrap();
        assert!(brute_force_prefix(&lp, &[], TokenId(0)).is_err());
        let wide =
            FrameLogProbs::from_logits(&Tensor::matrix(2, 5, vec![0.0; 10]).unwrap()).unwrap();
        assert!(brute_force_complete(&wide, &[TokenId(1)], TokenId(0)).is_err());
    }

    #[test]
    fn zero_frames_emit_only_the_empty_sequence() {
        let lp = FrameLogProbs::from_logits(&Tensor::matrix(0, 2, vec![]).unwrap()).unwrap();
        let empty = brute_force_complete(&lp, &[], TokenId(0)).unwrap();
        assert!(empty.abs() < 1e-12);
        let tok = brute_force_complete(&lp, &[TokenId(1)], TokenId(0)).unwrap();
        assert_eq!(tok, f64::NEG_INFINITY);
    }
}
