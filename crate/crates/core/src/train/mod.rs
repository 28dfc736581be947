//! Joint training of the recognizer: a CTC term on the frame logits plus
//! cross-entropy terms on the preliminary and fused token logits, optimized
//! with Adam over seeded mini-batches.

pub mod checkpoint;
pub mod dataset;
pub mod mlm;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_loss_traced};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_traced, init_params, FreezeMask, ModelConfig, ModelParams, TraceVars,
};
use crate::model::ForwardTrace;
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var};
use crate::vocab::{TokenId, Vocabulary};

fn default_ce_weight() -> f64 {
    0.5
}
fn default_ctc_weight() -> f64 {
    0.3
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    800
}
fn default_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the fused-logits cross-entropy inside the CE pair.
    #[serde(default = "default_ce_weight")]
    pub ce_fused_weight: f64,
    /// Weight of the preliminary-logits cross-entropy inside the CE pair.
    #[serde(default = "default_ce_weight")]
    pub ce_prelim_weight: f64,
    /// Interpolation toward the CTC term: total =
    /// `(1-w)*(ce pair) + w*ctc`.
    #[serde(default = "default_ctc_weight")]
    pub ctc_weight: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Encoder parameters stay fixed for this many leading steps.
    #[serde(default)]
    pub freeze_encoder_steps: usize,
    /// Language-model parameters stay fixed for this many leading steps.
    #[serde(default)]
    pub freeze_lm_steps: usize,
    /// Mass the cross-entropy targets spread uniformly over the vocabulary;
    /// `0` (the default) is the plain objective. Smoothing regularizes the
    /// token classifiers' confidence, which generalizes better on small
    /// corpora. The CTC term is never smoothed.
    #[serde(default)]
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("ce_fused_weight", self.ce_fused_weight),
            ("ce_prelim_weight", self.ce_prelim_weight),
            ("ctc_weight", self.ctc_weight),
        ] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {w}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive and finite".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0,1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// The scalar pieces of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub total: f64,
    pub ce_fused: f64,
    pub ce_prelim: f64,
    pub ctc: f64,
}

impl LossComponents {
    /// Recombines the parts under the configured weights; the traced and
    /// plain paths must agree with this within 1e-12.
    pub fn recombine(&self, cfg: &TrainConfig) -> f64 {
        (1.0 - cfg.ctc_weight)
            * (cfg.ce_fused_weight * self.ce_fused + cfg.ce_prelim_weight * self.ce_prelim)
            + cfg.ctc_weight * self.ctc
    }
}

/// Mean over `entries` of the cross-entropy of `log softmax(logits)` against
/// targets that put `1 - smoothing` on the entry's column and spread
/// `smoothing` uniformly over the vocabulary.
///
/// The spread term averages over every logit row, so nonzero smoothing
/// requires entries covering each row exactly once.
fn ce_at_entries_traced(
    tape: &mut Tape,
    logits: Var,
    entries: &[(usize, usize)],
    smoothing: f64,
) -> Var {
    debug_assert!(
        smoothing == 0.0 || entries.len() == tape.value(logits).rows(),
        "smoothing needs one entry per row"
    );
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.pick_entries(lsm, entries);
    let mean = tape.mean_all(picked);
    let hard = tape.scale(mean, smoothing - 1.0);
    if smoothing == 0.0 {
        return hard;
    }
    // Mean over all rows and columns is exactly the uniform-target term.
    let spread = tape.mean_all(lsm);
    let soft = tape.scale(spread, -smoothing);
    tape.add(hard, soft).expect("scalar shapes always add")
}

fn target_entries(target: &[TokenId]) -> Vec<(usize, usize)> {
    target.iter().enumerate().map(|(l, t)| (l, t.0)).collect()
}

/// Tape-borne joint loss over one utterance's forward trace. `target` must
/// match the token length the trace was built with. Blank is column 0 by the
/// vocabulary layout.
pub fn joint_loss_traced(
    tape: &mut Tape,
    trace: &TraceVars,
    target: &[TokenId],
    cfg: &TrainConfig,
) -> Result<(Var, LossComponents)> {
    let token_len = tape.value(trace.fused_logits).rows();
    if token_len != target.len() {
        return Err(Error::Contract(format!(
            "trace was built for {token_len} tokens but the target has {}",
            target.len()
        )));
    }
    let entries = target_entries(target);
    let ce_fused = ce_at_entries_traced(tape, trace.fused_logits, &entries, cfg.label_smoothing);
    let ce_prelim = ce_at_entries_traced(tape, trace.prelim_logits, &entries, cfg.label_smoothing);
    let ctc = ctc_loss_traced(tape, trace.frame_logits, target, TokenId(0))?;

    let ce_part = 1.0 - cfg.ctc_weight;
    let sf = tape.scale(ce_fused, ce_part * cfg.ce_fused_weight);
    let sp = tape.scale(ce_prelim, ce_part * cfg.ce_prelim_weight);
    let sc = tape.scale(ctc, cfg.ctc_weight);
    let ce_sum = tape.add(sf, sp)?;
    let total = tape.add(ce_sum, sc)?;
    let components = LossComponents {
        total: tape.value(total).item(),
        ce_fused: tape.value(ce_fused).item(),
        ce_prelim: tape.value(ce_prelim).item(),
        ctc: tape.value(ctc).item(),
    };
    Ok((total, components))
}

/// Gradient-free joint loss straight from a materialized trace. Computed by
/// an independent code path from the traced version.
pub fn joint_loss(
    trace: &ForwardTrace,
    target: &[TokenId],
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    if trace.token_len() != target.len() {
        return Err(Error::Contract(format!(
            "trace was built for {} tokens but the target has {}",
            trace.token_len(),
            target.len()
        )));
    }
    let smoothing = cfg.label_smoothing;
    let ce = |logits: &Tensor| -> f64 {
        let lsm = log_softmax_rows(logits);
        let s: f64 = target.iter().enumerate().map(|(l, t)| lsm.at(l, t.0)).sum();
        let hard = (smoothing - 1.0) * (s / target.len() as f64);
        if smoothing == 0.0 {
            return hard;
        }
        let spread: f64 = lsm.data().iter().sum::<f64>() / lsm.numel() as f64;
        hard - smoothing * spread
    };
    let ce_fused = ce(&trace.fused_logits);
    let ce_prelim = ce(&trace.prelim_logits);
    let ctc = ctc_loss(&trace.frame_logits, target, TokenId(0))?;
    let mut comp = LossComponents { total: 0.0, ce_fused, ce_prelim, ctc };
    comp.total = comp.recombine(cfg);
    Ok(comp)
}

// ── Optimizer ──

/// Adam with fixed hyperparameters (0.9, 0.999, 1e-8) and bias correction.
pub struct Adam {
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.numel()));
        Adam {
            lr,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update from gradients listed in the parameter visit order.
    /// Parameters the mask freezes are left untouched.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        freeze: &FreezeMask,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        let mut failure: Option<Error> = None;
        params.visit_mut(&mut |name, tensor| {
            let idx = i;
            i += 1;
            if failure.is_some() || freeze.freezes(name) {
                return;
            }
            let g = grads[idx].data();
            if g.len() != tensor.numel() {
                failure = Some(Error::Dimension(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
                return;
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for (k, x) in tensor.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ── Training loop ──

/// One prepared training example: features plus target token ids.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub features: Tensor,
    pub target: Vec<TokenId>,
}

/// Maps raw utterances onto vocabulary ids, refusing empty transcripts.
pub fn prepare(utterances: &[dataset::Utterance], vocab: &Vocabulary) -> Result<Vec<TrainUtterance>> {
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            if u.transcript.is_empty() {
                return Err(Error::Argument(format!("utterance {i} has an empty transcript")));
            }
            Ok(TrainUtterance { features: u.features.clone(), target: u.target_ids(vocab) })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce_fused: f64,
    pub ce_prelim: f64,
    pub ctc: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
    /// Step at which a non-finite loss or gradient appeared; `params` then
    /// holds the last state from before that step's update.
    pub diverged_at: Option<usize>,
}

fn zero_grads_like(params: &ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(&mut |_, t| out.push(Tensor::zeros(t.shape().to_vec())));
    out
}

/// Seeded mini-batch training on the joint loss. Batches sample utterances
/// with replacement; gradients are averaged over the batch utterance by
/// utterance, which matches padded batching exactly because every loss term
/// is a per-utterance mean.
pub fn train(
    data: &[TrainUtterance],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} but vocabulary has {} tokens",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    if data.is_empty() {
        return Err(Error::Argument("training data is empty".into()));
    }
    for (i, u) in data.iter().enumerate() {
        if u.features.cols() != model_cfg.feature_dim {
            return Err(Error::Dimension(format!(
                "utterance {i} has feature dim {}, model expects {}",
                u.features.cols(),
                model_cfg.feature_dim
            )));
        }
    }

    let mut params = init_params(model_cfg, cfg.seed)?;
    // Distinct stream from the init draw.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let freeze = FreezeMask {
            encoder: step < cfg.freeze_encoder_steps,
            lm: step < cfg.freeze_lm_steps,
            rest: false,
        };
        let mut grad_acc = zero_grads_like(&params);
        let mut mean = LossComponents { total: 0.0, ce_fused: 0.0, ce_prelim: 0.0, ctc: 0.0 };
        let inv = 1.0 / cfg.batch_size as f64;
        let mut finite = true;

        'batch: for _ in 0..cfg.batch_size {
            let utt = &data[rng.gen_range(0..data.len())];
            let mut tape = Tape::new();
            let f = tape.constant(utt.features.clone());
            let vars = params.bind(&mut tape, &freeze);
            let trace = forward_traced(&mut tape, f, utt.target.len(), &vars)?;
            let (loss, comp) = joint_loss_traced(&mut tape, &trace, &utt.target, cfg)?;
            if !comp.total.is_finite() {
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
            mean.total += inv * comp.total;
            mean.ce_fused += inv * comp.ce_fused;
            mean.ce_prelim += inv * comp.ce_prelim;
            mean.ctc += inv * comp.ctc;
        }

        if !finite {
            // The update below never ran, so the current parameters are the
            // last state that produced finite numbers.
            return Ok(TrainRun { params, history, diverged_at: Some(step) });
        }
        adam.apply(&mut params, &grad_acc, &freeze)?;
        history.push(LossRecord {
            step,
            total: mean.total,
            ce_fused: mean.ce_fused,
            ce_prelim: mean.ce_prelim,
            ctc: mean.ctc,
        });
    }
    Ok(TrainRun { params, history, diverged_at: None })
}

/// Worst relative disagreement between the traced gradient of the joint loss
/// and central finite differences, over `coords` randomly sampled parameter
/// coordinates. Exposed so integration checks share one harness.
pub fn fd_check_joint_loss(
    params: &ModelParams,
    features: &Tensor,
    target: &[TokenId],
    cfg: &TrainConfig,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    // Analytic pass.
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = params.bind(&mut tape, &FreezeMask::none());
    let trace = forward_traced(&mut tape, f, target.len(), &vars)?;
    let (loss, _) = joint_loss_traced(&mut tape, &trace, target, cfg)?;
    let grads = tape.backward(loss)?;
    let var_list = ModelParams::var_list(&vars);
    let analytic: Vec<Tensor> = var_list.iter().map(|(_, v)| grads.wrt(*v)).collect();

    // Coordinate sample across all tensors.
    let mut sizes = Vec::new();
    params.visit(&mut |_, t| sizes.push(t.numel()));
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let plain_loss = |p: &ModelParams| -> Result<f64> {
        let trace = forward(p, features, target.len())?;
        Ok(joint_loss(&trace, target, cfg)?.recombine(cfg))
    };
    for _ in 0..coords {
        let mut flat = rng.gen_range(0..total);
        let mut tensor_idx = 0;
        while flat >= sizes[tensor_idx] {
            flat -= sizes[tensor_idx];
            tensor_idx += 1;
        }
        let mut probe = params.clone();
        let nudge = |p: &mut ModelParams, delta: f64| {
            let mut i = 0;
            p.visit_mut(&mut |_, t| {
                if i == tensor_idx {
                    t.data_mut()[flat] += delta;
                }
                i += 1;
            });
        };
        nudge(&mut probe, eps);
        let up = plain_loss(&probe)?;
        nudge(&mut probe, -2.0 * eps);
        let down = plain_loss(&probe)?;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[tensor_idx].data()[flat];
        let denom = a.abs().max(numeric.abs());
        // Both effectively zero: finite differences only produce rounding
        // residue there.
        if denom < 1e-8 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
