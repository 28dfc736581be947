//! Cache-based joint CTC/attention beam decoding.
//!
//! The linguistic branch is evaluated exactly once per utterance; its fused
//! logits become an `L_hat x V` table of per-position token log-probs. The
//! length-synchronous beam search then scores every extension by combining a
//! table lookup with an incremental CTC prefix score, so no model evaluation
//! happens inside the search loop. Positions past the predicted length fall
//! back to a fixed distribution that pushes hypotheses to terminate.

use std::cmp::Ordering;

use crate::ctc::{FrameLogProbs, PrefixScorer, PrefixState};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::{log_softmax_rows, log_sum_exp, Tensor};
use crate::vocab::{TokenId, Vocabulary};

/// How a hypothesis' attention-side score aggregates per-position scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttScoreMode {
    /// Sum over all positions: hypotheses compete on whole-sequence scores.
    #[default]
    Cumulative,
    /// Only the most recent position's score; kept for comparison studies.
    LastToken,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// CTC weight in the joint score; the attention side gets `1 - mu`.
    pub mu: f64,
    /// Hard length cap; `None` derives `max(2*L_hat, L_hat + 10)`.
    pub l_max: Option<usize>,
    /// Probability forced onto eos at positions past the predicted length.
    pub eos_forced_prob: f64,
    /// Log-score gap under the global best that counts as "stopped improving".
    pub end_detect_margin: f64,
    /// Consecutive lengths that must all sit below the margin.
    pub end_detect_window: usize,
    pub end_detect: bool,
    pub att_mode: AttScoreMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 10,
            mu: 0.3,
            l_max: None,
            eos_forced_prob: 0.9,
            end_detect_margin: 10.0,
            end_detect_window: 3,
            end_detect: true,
            att_mode: AttScoreMode::Cumulative,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must lie in [0,1], got {}", self.mu)));
        }
        if let Some(l) = self.l_max {
            if l < 1 {
                return Err(Error::Config("l_max must be at least 1".into()));
            }
        }
        if !(self.eos_forced_prob > 0.0 && self.eos_forced_prob < 1.0) {
            return Err(Error::Config(format!(
                "eos_forced_prob must lie strictly inside (0,1), got {}",
                self.eos_forced_prob
            )));
        }
        if self.end_detect_window < 1 {
            return Err(Error::Config("end_detect_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_l_max(&self, l_hat: usize) -> usize {
        self.l_max.unwrap_or_else(|| (2 * l_hat).max(l_hat + 10))
    }
}

/// Per-utterance table of attention-side token log-probabilities.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    att_log_probs: Tensor,
    l_hat: usize,
    forward_passes: usize,
}

impl ScoreCache {
    /// Builds the cache from an utterance's single forward pass.
    pub fn from_trace(trace: &ForwardTrace, l_hat: usize) -> Result<Self> {
        Self::from_fused_logits(&trace.fused_logits, l_hat)
    }

    /// Row-softmaxes fused logits; the row count must equal the predicted
    /// length the forward pass was run with.
    pub fn from_fused_logits(fused_logits: &Tensor, l_hat: usize) -> Result<Self> {
        if fused_logits.rows() != l_hat {
            return Err(Error::Contract(format!(
                "cache built for predicted length {l_hat} but fused logits have {} rows",
                fused_logits.rows()
            )));
        }
        Ok(ScoreCache {
            att_log_probs: log_softmax_rows(fused_logits),
            l_hat,
            forward_passes: 1,
        })
    }

    /// Direct construction from already-normalized rows (each must
    /// log-sum-exp to 0 within 1e-9).
    pub fn from_log_probs(att_log_probs: Tensor) -> Result<Self> {
        for r in 0..att_log_probs.rows() {
            let s = log_sum_exp(att_log_probs.row(r))?;
            if s.abs() > 1e-9 {
                return Err(Error::Argument(format!("cache row {r} log-sum-exps to {s}")));
            }
        }
        let l_hat = att_log_probs.rows();
        Ok(ScoreCache { att_log_probs, l_hat, forward_passes: 1 })
    }

    /// Zero predicted length: the search goes straight to eos forcing.
    pub fn empty(vocab_size: usize) -> Self {
        ScoreCache {
            att_log_probs: Tensor::new(vec![0, vocab_size], vec![]).expect("empty tensor"),
            l_hat: 0,
            forward_passes: 1,
        }
    }

    pub fn l_hat(&self) -> usize {
        self.l_hat
    }

    pub fn att_log_probs(&self) -> &Tensor {
        &self.att_log_probs
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }
}

/// Attention-side log-score of emitting `token` at 1-based position `l`.
///
/// Within the predicted length this is a pure cache lookup. Past it, eos
/// receives `ln(eos_forced_prob)` and every other candidate splits the
/// remaining mass evenly, so the forced scores still form a distribution.
pub fn token_score(
    cache: &ScoreCache,
    cfg: &DecodeConfig,
    l: usize,
    token: TokenId,
    n_real: usize,
) -> f64 {
    debug_assert!(l >= 1, "positions are 1-based");
    if l <= cache.l_hat {
        cache.att_log_probs.at(l - 1, token.0)
    } else if token_is_eos_marker(token, cache) {
        cfg.eos_forced_prob.ln()
    } else {
        ((1.0 - cfg.eos_forced_prob) / n_real as f64).ln()
    }
}

// The cache has no notion of the vocabulary; eos is whatever column the
// caller says. Kept private so the public surface stays by-id.
fn token_is_eos_marker(token: TokenId, cache: &ScoreCache) -> bool {
    token.0 + 1 == cache.att_log_probs.cols()
}

/// An eos-terminated hypothesis. `tokens` holds real tokens only.
#[derive(Debug, Clone)]
pub struct Completed {
    pub tokens: Vec<TokenId>,
    pub alpha_ctc: f64,
    pub alpha_att: f64,
    pub joint: f64,
}

impl Completed {
    /// Output length including the terminating eos.
    fn length_with_eos(&self) -> usize {
        self.tokens.len() + 1
    }
}

// The partial's own CTC prefix score lives in `state`; only the combined
// score is kept for pruning.
#[derive(Debug, Clone)]
struct Partial {
    tokens: Vec<TokenId>,
    alpha_att: f64,
    joint: f64,
    state: PrefixState,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// Best hypothesis' real tokens (eos implied).
    pub tokens: Vec<TokenId>,
    pub alpha_ctc: f64,
    pub alpha_att: f64,
    pub joint: f64,
    /// True when no hypothesis terminated and the best partial was returned.
    pub degraded: bool,
    /// True when end detection cut the search before the length cap.
    pub stopped_early: bool,
    /// Length steps actually searched.
    pub steps: usize,
    /// Completed hypotheses collected.
    pub completed: usize,
}

/// `mu`-weighted combination, guarding `0 * -inf`.
fn combine(mu: f64, alpha_ctc: f64, alpha_att: f64) -> f64 {
    if mu == 0.0 {
        alpha_att
    } else if mu == 1.0 {
        alpha_ctc
    } else {
        mu * alpha_ctc + (1.0 - mu) * alpha_att
    }
}

/// Deterministic hypothesis order: higher joint score first, then shorter
/// token sequence, then lexicographic token ids.
fn hyp_order(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

/// Keeps the `beam_width` best hypotheses under the deterministic order.
fn prune(queue: &mut Vec<Partial>, beam_width: usize) {
    queue.sort_unstable_by(|a, b| hyp_order((a.joint, &a.tokens), (b.joint, &b.tokens)));
    queue.truncate(beam_width);
}

/// True when, for each of the last `end_detect_window` output lengths
/// `(l - M, l]`, the best completed score at that length sits more than
/// `end_detect_margin` below the global best. Lengths with no completion
/// count as below. An empty completion set never stops the search.
pub fn end_detect(completed: &[Completed], l: usize, cfg: &DecodeConfig) -> bool {
    if completed.is_empty() {
        return false;
    }
    let global_best = completed.iter().map(|c| c.joint).fold(f64::NEG_INFINITY, f64::max);
    for back in 0..cfg.end_detect_window {
        let bucket_best = match l.checked_sub(back) {
            Some(ll) if ll >= 1 => completed
                .iter()
                .filter(|c| c.length_with_eos() == ll)
                .map(|c| c.joint)
                .fold(f64::NEG_INFINITY, f64::max),
            // Lengths before the start of the search hold nothing.
            _ => f64::NEG_INFINITY,
        };
        if !(bucket_best < global_best - cfg.end_detect_margin) {
            return false;
        }
    }
    true
}

/// Length-synchronous joint beam search over one utterance.
///
/// At step `l` every surviving partial of length `l-1` is extended by every
/// real token (scored via the cache plus an incremental CTC prefix update)
/// and also completed with eos into the terminated pool. When the length cap
/// is reached without early termination, the remaining partials are flushed
/// with eos so sequences of the cap length compete too.
pub fn joint_decode(
    frame_log_probs: &FrameLogProbs,
    cache: &ScoreCache,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<DecodeOutcome> {
    cfg.validate()?;
    if frame_log_probs.frames() == 0 {
        return Err(Error::Argument("cannot decode zero frames".into()));
    }
    if frame_log_probs.vocab_size() != vocab.size() {
        return Err(Error::Dimension(format!(
            "frame posteriors over {} symbols but vocabulary has {}",
            frame_log_probs.vocab_size(),
            vocab.size()
        )));
    }
    if cache.att_log_probs.cols() != vocab.size() {
        return Err(Error::Dimension(format!(
            "cache over {} symbols but vocabulary has {}",
            cache.att_log_probs.cols(),
            vocab.size()
        )));
    }

    let scorer = PrefixScorer::new(frame_log_probs, vocab.blank(), vocab.eos())?;
    let n_real = vocab.real_count();
    let eos = vocab.eos();
    let l_max = cfg.effective_l_max(cache.l_hat());

    let mut beam = vec![Partial {
        tokens: Vec::new(),
        alpha_att: 0.0,
        joint: combine(cfg.mu, 0.0, 0.0),
        state: scorer.init_state(),
    }];
    let mut completed: Vec<Completed> = Vec::new();
    let mut steps = 0;
    let mut stopped_early = false;

    for l in 1..=l_max {
        steps = l;
        let mut next: Vec<Partial> = Vec::with_capacity(beam.len() * n_real);
        for g in &beam {
            complete_with_eos(&scorer, g, cache, cfg, l, eos, n_real, &mut completed)?;
            for c in vocab.real_ids() {
                let att = token_score(cache, cfg, l, c, n_real);
                let alpha_att = match cfg.att_mode {
                    AttScoreMode::Cumulative => g.alpha_att + att,
                    AttScoreMode::LastToken => att,
                };
                let (alpha_ctc, state) = scorer.extend(&g.state, c)?;
                let mut tokens = g.tokens.clone();
                tokens.push(c);
                next.push(Partial {
                    tokens,
                    alpha_att,
                    joint: combine(cfg.mu, alpha_ctc, alpha_att),
                    state,
                });
            }
        }
        prune(&mut next, cfg.beam_width);
        beam = next;
        if cfg.end_detect && end_detect(&completed, l, cfg) {
            stopped_early = true;
            break;
        }
    }

    if !stopped_early {
        // Give cap-length partials their terminating eos so they compete.
        for g in &beam {
            complete_with_eos(&scorer, g, cache, cfg, l_max + 1, eos, n_real, &mut completed)?;
        }
    }

    let n_completed = completed.len();
    let best = completed
        .into_iter()
        .min_by(|a, b| hyp_order((a.joint, &a.tokens), (b.joint, &b.tokens)));
    if let Some(best) = best {
        return Ok(DecodeOutcome {
            tokens: best.tokens,
            alpha_ctc: best.alpha_ctc,
            alpha_att: best.alpha_att,
            joint: best.joint,
            degraded: false,
            stopped_early,
            steps,
            completed: n_completed,
        });
    }

    // Structurally unreachable (every search step files an eos completion),
    // kept as a safety net: surface the best partial, visibly flagged.
    let g = beam
        .first()
        .ok_or_else(|| Error::Contract("beam emptied during search".into()))?;
    let (alpha_ctc, _) = scorer.extend(&g.state, eos)?;
    Ok(DecodeOutcome {
        tokens: g.tokens.clone(),
        alpha_ctc,
        alpha_att: g.alpha_att,
        joint: combine(cfg.mu, alpha_ctc, g.alpha_att),
        degraded: true,
        stopped_early,
        steps,
        completed: 0,
    })
}

#[allow(clippy::too_many_arguments)]
fn complete_with_eos(
    scorer: &PrefixScorer,
    g: &Partial,
    cache: &ScoreCache,
    cfg: &DecodeConfig,
    l: usize,
    eos: TokenId,
    n_real: usize,
    completed: &mut Vec<Completed>,
) -> Result<()> {
    let att = token_score(cache, cfg, l, eos, n_real);
    let alpha_att = match cfg.att_mode {
        AttScoreMode::Cumulative => g.alpha_att + att,
        AttScoreMode::LastToken => att,
    };
    let (alpha_ctc, _) = scorer.extend(&g.state, eos)?;
    completed.push(Completed {
        tokens: g.tokens.clone(),
        alpha_ctc,
        alpha_att,
        joint: combine(cfg.mu, alpha_ctc, alpha_att),
    });
    Ok(())
}

/// Reference decoder: scores every real-token sequence of length `0..=l_max`
/// by full enumeration and returns the argmax under the same deterministic
/// order as `joint_decode`. Exponential in `l_max`; validation only.
pub fn exhaustive_decode(
    frame_log_probs: &FrameLogProbs,
    cache: &ScoreCache,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(Vec<TokenId>, f64)> {
    cfg.validate()?;
    if cfg.att_mode != AttScoreMode::Cumulative {
        return Err(Error::Argument("reference decoder scores cumulatively".into()));
    }
    let n_real = vocab.real_count();
    let l_max = cfg.effective_l_max(cache.l_hat());
    if n_real.checked_pow(l_max as u32).map_or(true, |s| s > 500_000) {
        return Err(Error::Argument("enumeration space too large".into()));
    }

    let scorer = PrefixScorer::new(frame_log_probs, vocab.blank(), vocab.eos())?;
    let eos = vocab.eos();
    let mut best: Option<(f64, Vec<TokenId>)> = None;
    // Depth-first over prefixes; every node is also a terminated candidate.
    let mut stack: Vec<(PrefixState, Vec<TokenId>, f64)> =
        vec![(scorer.init_state(), Vec::new(), 0.0)];
    while let Some((state, tokens, alpha_att)) = stack.pop() {
        let l = tokens.len() + 1;
        let att_eos = alpha_att + token_score(cache, cfg, l, eos, n_real);
        let (ctc_complete, _) = scorer.extend(&state, eos)?;
        let joint = combine(cfg.mu, ctc_complete, att_eos);
        let better = match &best {
            None => true,
            Some((bj, bt)) => hyp_order((joint, &tokens), (*bj, bt)) == Ordering::Less,
        };
        if better {
            best = Some((joint, tokens.clone()));
        }
        if tokens.len() < l_max {
            for c in vocab.real_ids() {
                let (_, next_state) = scorer.extend(&state, c)?;
                let mut next_tokens = tokens.clone();
                next_tokens.push(c);
                let att = alpha_att + token_score(cache, cfg, l, c, n_real);
                stack.push((next_state, next_tokens, att));
            }
        }
    }
    let (joint, tokens) = best.expect("at least the empty sequence was scored");
    Ok((tokens, joint))
}
