//! Label-synchronous CTC prefix scoring.
//!
//! For a hypothesis prefix `g` the scorer keeps, per frame `t`, the log mass
//! of alignments whose collapse equals `g` split by whether the alignment
//! ends in the last label (`gamma_n`) or in a blank (`gamma_b`). Extending by
//! one token then costs O(T) instead of re-running a full forward pass.

use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;
use crate::vocab::TokenId;

use super::FrameLogProbs;

/// Scores prefix extensions against one utterance's frame posteriors.
pub struct PrefixScorer<'a> {
    log_probs: &'a FrameLogProbs,
    blank: TokenId,
    eos: TokenId,
}

/// Per-prefix scorer state; holds everything an extension needs.
#[derive(Debug, Clone)]
pub struct PrefixState {
    prefix: Vec<TokenId>,
    /// gamma_n[t]: log mass of alignments over frames 0..=t collapsing to the
    /// prefix and ending in its last label.
    gamma_n: Vec<f64>,
    /// gamma_b[t]: as above but ending in blank.
    gamma_b: Vec<f64>,
    /// log sum over full sequences that start with this prefix.
    prefix_logprob: f64,
    terminal: bool,
}

impl PrefixState {
    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    pub fn prefix_logprob(&self) -> f64 {
        self.prefix_logprob
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    log_sum_exp(&[a, b]).expect("two summands")
}

impl<'a> PrefixScorer<'a> {
    pub fn new(log_probs: &'a FrameLogProbs, blank: TokenId, eos: TokenId) -> Result<Self> {
        if blank == eos {
            return Err(Error::Argument("blank and eos must differ".into()));
        }
        let v = log_probs.vocab_size();
        if blank.0 >= v || eos.0 >= v {
            return Err(Error::Argument(format!(
                "blank {blank} / eos {eos} outside the {v}-column alphabet"
            )));
        }
        Ok(PrefixScorer { log_probs, blank, eos })
    }

    /// State for the empty prefix: only all-blank alignments, probability one
    /// of "starts with nothing".
    pub fn init_state(&self) -> PrefixState {
        let t_len = self.log_probs.frames();
        let mut gamma_b = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += self.log_probs.lp(t, self.blank);
            gamma_b.push(acc);
        }
        PrefixState {
            prefix: Vec::new(),
            gamma_n: vec![f64::NEG_INFINITY; t_len],
            gamma_b,
            prefix_logprob: 0.0,
            terminal: false,
        }
    }

    /// Extends `state` by `token`, returning the new prefix log-score and the
    /// successor state. `eos` yields the log-probability of the completed
    /// sequence; a terminal state refuses further extension.
    pub fn extend(&self, state: &PrefixState, token: TokenId) -> Result<(f64, PrefixState)> {
        if state.terminal {
            return Err(Error::Contract("extend past a completed hypothesis".into()));
        }
        if token == self.blank {
            return Err(Error::Argument("cannot extend a prefix by blank".into()));
        }
        let t_len = self.log_probs.frames();

        if token == self.eos {
            let score = if t_len == 0 {
                // Zero frames emit the empty sequence with probability one.
                if state.prefix.is_empty() { 0.0 } else { f64::NEG_INFINITY }
            } else {
                lse2(state.gamma_n[t_len - 1], state.gamma_b[t_len - 1])
            };
            let mut done = state.clone();
            done.prefix_logprob = score;
            done.terminal = true;
            return Ok((score, done));
        }

        let mut gamma_n = vec![f64::NEG_INFINITY; t_len];
        let mut gamma_b = vec![f64::NEG_INFINITY; t_len];
        let mut psi = f64::NEG_INFINITY;
        // phi[t]: mass of the parent prefix after frame t that the new token
        // may attach to. A repeat of the parent's last label must cross a
        // blank, so only gamma_b counts then.
        let repeat = state.prefix.last() == Some(&token);
        // Before any frame the parent mass is 1 for the empty prefix, else 0.
        let mut phi_prev = if state.prefix.is_empty() { 0.0 } else { f64::NEG_INFINITY };
        for t in 0..t_len {
            let p_tok = self.log_probs.lp(t, token);
            let prev_n = if t == 0 { f64::NEG_INFINITY } else { gamma_n[t - 1] };
            let prev_b = if t == 0 { f64::NEG_INFINITY } else { gamma_b[t - 1] };
            gamma_n[t] = p_tok + lse2(prev_n, phi_prev);
            gamma_b[t] = self.log_probs.lp(t, self.blank) + lse2(prev_b, prev_n);
            psi = lse2(psi, p_tok + phi_prev);
            phi_prev = if repeat {
                state.gamma_b[t]
            } else {
                lse2(state.gamma_b[t], state.gamma_n[t])
            };
        }

        let mut prefix = state.prefix.clone();
        prefix.push(token);
        let next = PrefixState { prefix, gamma_n, gamma_b, prefix_logprob: psi, terminal: false };
        Ok((psi, next))
    }
}
