//! Masked-token pretraining for the linguistic branch: random positions of a
//! text corpus are replaced by the unknown token and the branch is trained to
//! recover the originals. The acoustic stack stays frozen; parameters the
//! masked objective never touches receive exactly zero gradients, so the
//! optimizer leaves them bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{lm_logits_from_ids_traced, FreezeMask, ModelParams};
use crate::tensor::Tape;
use crate::vocab::{TokenId, Vocabulary};

use super::Adam;

fn default_mask_prob() -> f64 {
    0.15
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    200
}
fn default_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmConfig {
    /// Probability that a position is masked (replaced by the unknown token).
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob must lie in [0,1], got {}",
                self.mask_prob
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MlmRun {
    pub params: ModelParams,
    /// Per-step mean cross-entropy over the masked positions. A step whose
    /// batch masked nothing records 0.
    pub history: Vec<f64>,
    pub diverged_at: Option<usize>,
}

/// Pretrains the linguistic branch on `corpus` and returns the updated
/// parameters. Sequences must be nonempty and hold ids the model can embed;
/// blank never appears in text, so it is refused.
pub fn mlm_pretrain(
    params: ModelParams,
    corpus: &[Vec<TokenId>],
    vocab: &Vocabulary,
    cfg: &MlmConfig,
) -> Result<MlmRun> {
    cfg.validate()?;
    if params.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            params.config.vocab_size,
            vocab.size()
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Argument("pretraining corpus is empty".into()));
    }
    for (i, seq) in corpus.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Argument(format!("corpus sequence {i} is empty")));
        }
        if let Some(t) = seq.iter().find(|t| t.0 >= vocab.size() || **t == vocab.blank()) {
            return Err(Error::Argument(format!(
                "corpus sequence {i} holds unusable token id {t}"
            )));
        }
    }

    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b_6564_6c6d);
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut history = Vec::with_capacity(cfg.steps);
    let freeze = FreezeMask { encoder: true, lm: false, rest: false };
    let unk = vocab.unk();

    for step in 0..cfg.steps {
        let mut grad_acc = super::zero_grads_like(&params);
        let inv = 1.0 / cfg.batch_size as f64;
        let mut mean_loss = 0.0;
        let mut finite = true;

        'batch: for _ in 0..cfg.batch_size {
            let seq = &corpus[rng.gen_range(0..corpus.len())];
            let mut masked = seq.clone();
            let mut entries = Vec::new();
            for (pos, orig) in seq.iter().enumerate() {
                if rng.gen_range(0.0..1.0) < cfg.mask_prob {
                    masked[pos] = unk;
                    entries.push((pos, orig.0));
                }
            }
            // Nothing masked: the example carries no signal and its loss is 0.
            if entries.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, &freeze);
            let logits = lm_logits_from_ids_traced(&mut tape, &masked, &vars)?;
            let loss = super::ce_at_entries_traced(&mut tape, logits, &entries, 0.0);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                finite = false;
                break 'batch;
            }
            let grads = tape.backward(loss)?;
            for (i, (_, var)) in ModelParams::var_list(&vars).iter().enumerate() {
                let g = grads.wrt(*var);
                if !g.all_finite() {
                    finite = false;
                    break 'batch;
                }
                for (acc, &x) in grad_acc[i].data_mut().iter_mut().zip(g.data()) {
                    *acc += inv * x;
                }
            }
            mean_loss += inv * value;
        }

        if !finite {
            return Ok(MlmRun { params, history, diverged_at: Some(step) });
        }
        adam.apply(&mut params, &grad_acc, &freeze)?;
        history.push(mean_loss);
    }
    Ok(MlmRun { params, history, diverged_at: None })
}
