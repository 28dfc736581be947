//! Acceptance suite. Each criterion is one test printing exactly one
//! verdict line (`criterion N (<name>): PASS/FAIL ...`); run with
//! `cargo test -p narwhal --test acceptance -- --nocapture` to see them.
//!
//! A process-wide lock serializes the criteria: wall-clock budgets and the
//! forward-pass counter only read cleanly without concurrent work.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use narwhal::ctc::{
    brute_force_complete, brute_force_prefix, ctc_loss, FrameLogProbs, PrefixScorer,
};
use narwhal::decoder::{exhaustive_decode, joint_decode, DecodeConfig, ScoreCache};
use narwhal::metrics::corpus_error_rate;
use narwhal::model::{forward_pass_count, init_params, ModelConfig};
use narwhal::pipeline::{bench_decode, decode_corpus, decode_utterance, infer, DecodeMode};
use narwhal::tensor::{log_softmax_rows, Tensor};
use narwhal::train::checkpoint::{load_checkpoint, save_checkpoint};
use narwhal::train::synth::{gen_synthetic, SyntheticSpec};
use narwhal::train::{fd_check_joint_loss, prepare, train, TrainConfig, TrainRun};
use narwhal::vocab::{TokenId, Vocabulary};

static LOCK: Mutex<()> = Mutex::new(());

fn serialize() -> MutexGuard<'static, ()> {
    // A failed criterion poisons the lock; later criteria still run.
    LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Prints the verdict line, then enforces it.
fn report(number: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {number} ({name}): {verdict} {detail}");
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent fixture shape")
}

/// Smallest frame count that can carry `target`: one frame per label plus a
/// separating blank per adjacent repeat.
fn min_frames(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[test]
fn criterion_1_ctc_loss_matches_alignment_enumeration() {
    let _g = serialize();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_err = 0.0f64;
    let instances = 200;
    for _ in 0..instances {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=4); // blank + up to 3 labels
        let logits = random_logits(&mut rng, frames, vocab);
        let log_probs = FrameLogProbs::from_logits(&logits).expect("finite logits");
        // Random representable target over the non-blank labels.
        let target: Vec<TokenId> = loop {
            let len = rng.gen_range(0..=3);
            let cand: Vec<TokenId> =
                (0..len).map(|_| TokenId(rng.gen_range(1..vocab))).collect();
            if min_frames(&cand) <= frames {
                break cand;
            }
        };
        let loss = ctc_loss(&logits, &target, TokenId(0)).expect("representable target");
        let reference =
            brute_force_complete(&log_probs, &target, TokenId(0)).expect("within brute limits");
        max_err = max_err.max(((-loss).exp() - reference.exp()).abs());
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = max_err <= 1e-9 && elapsed < 10.0;
    report(
        1,
        "ctc-loss-oracle",
        pass,
        &format!("max probability error {max_err:.3e} over {instances} instances in {elapsed:.1}s (tolerance 1e-9, budget 10s)"),
    );
}

#[test]
fn criterion_2_prefix_scorer_matches_enumeration() {
    let _g = serialize();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_err = 0.0f64;
    let mut prefixes_checked = 0usize;
    let instances = 1000;
    for _ in 0..instances {
        let frames = rng.gen_range(2..=6);
        let vocab = rng.gen_range(3..=4); // blank, 1-2 labels, eos
        let logits = random_logits(&mut rng, frames, vocab);
        let log_probs = FrameLogProbs::from_logits(&logits).expect("finite logits");
        let scorer = PrefixScorer::new(&log_probs, TokenId(0), TokenId(vocab - 1))
            .expect("valid scorer inputs");
        // Every real-token prefix of length <= 3, each state chained from its
        // parent's, exactly as the beam search extends hypotheses.
        let mut frontier = vec![(Vec::<TokenId>::new(), scorer.init_state())];
        for _depth in 1..=3 {
            let mut next = Vec::new();
            for (prefix, state) in &frontier {
                for label in 1..vocab - 1 {
                    let (alpha, extended) =
                        scorer.extend(state, TokenId(label)).expect("in-range label");
                    let mut longer = prefix.clone();
                    longer.push(TokenId(label));
                    let reference = brute_force_prefix(&log_probs, &longer, TokenId(0))
                        .expect("within brute limits");
                    max_err = max_err.max((alpha.exp() - reference.exp()).abs());
                    // The eos extension claims exactly the completed mass.
                    let (complete, _) =
                        scorer.extend(&extended, TokenId(vocab - 1)).expect("eos extension");
                    let complete_ref = brute_force_complete(&log_probs, &longer, TokenId(0))
                        .expect("within brute limits");
                    max_err = max_err.max((complete.exp() - complete_ref.exp()).abs());
                    prefixes_checked += 1;
                    next.push((longer, extended));
                }
            }
            frontier = next;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = max_err <= 1e-9 && elapsed < 60.0;
    report(
        2,
        "prefix-scorer-oracle",
        pass,
        &format!("max probability error {max_err:.3e} over {prefixes_checked} prefixes from {instances} instances in {elapsed:.1}s (tolerance 1e-9, budget 60s)"),
    );
}

#[test]
fn criterion_3_beam_search_equals_exhaustive_argmax() {
    let _g = serialize();
    let t0 = Instant::now();
    let vocab = Vocabulary::from_tokens(
        ["<blank>", "<unk>", "a", "b", "c", "<eos>"].iter().map(|s| s.to_string()).collect(),
    )
    .expect("valid vocabulary layout");
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mus = [0.3, 0.0, 1.0, 0.7];
    let mut worst_gap = 0.0f64;
    let mut mismatches = 0usize;
    let models = 100;
    for i in 0..models {
        let frames = rng.gen_range(3..=6);
        let frame_lp = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, vocab.size()))
            .expect("finite logits");
        let l_hat = rng.gen_range(0..=3);
        let cache_rows = log_softmax_rows(&random_logits(&mut rng, l_hat, vocab.size()));
        let cache = ScoreCache::from_log_probs(cache_rows).expect("normalized rows");
        let cfg = DecodeConfig {
            beam_width: 81,
            mu: mus[i % mus.len()],
            l_max: Some(4),
            end_detect: false,
            ..DecodeConfig::default()
        };
        let outcome = joint_decode(&frame_lp, &cache, &vocab, &cfg).expect("search runs");
        let (best_tokens, best_joint) =
            exhaustive_decode(&frame_lp, &cache, &vocab, &cfg).expect("enumeration runs");
        if outcome.tokens != best_tokens {
            mismatches += 1;
        }
        worst_gap = worst_gap.max((outcome.joint - best_joint).abs());
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && worst_gap <= 1e-9 && elapsed < 60.0;
    report(
        3,
        "exhaustive-decode-equivalence",
        pass,
        &format!("{mismatches} argmax mismatches, max score gap {worst_gap:.3e} over {models} random models in {elapsed:.1}s (tolerance 1e-9, budget 60s)"),
    );
}

#[test]
fn criterion_4_joint_loss_gradients_match_finite_differences() {
    let _g = serialize();
    let t0 = Instant::now();
    let model_cfg = ModelConfig {
        feature_dim: 8,
        width: 8,
        heads: 2,
        ff_hidden: 16,
        encoder_blocks: 1,
        lm_blocks: 1,
        vocab_size: 6,
        fusion_weight: 0.3,
    };
    let params = init_params(&model_cfg, 404).expect("valid model config");
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let features = random_logits(&mut rng, 5, 8);
    let target = vec![TokenId(2), TokenId(3), TokenId(4)];
    let mut worst = 0.0f64;
    for (i, ctc_weight) in [0.0, 0.3, 1.0].into_iter().enumerate() {
        let cfg = TrainConfig { ctc_weight, ..TrainConfig::default() };
        let err = fd_check_joint_loss(&params, &features, &target, &cfg, 1e-5, 400, 406 + i as u64)
            .expect("loss evaluates");
        worst = worst.max(err);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && elapsed < 30.0;
    report(
        4,
        "joint-loss-gradient-integrity",
        pass,
        &format!("max relative gradient error {worst:.3e} across objective weightings 0/0.3/1 in {elapsed:.1}s (tolerance 1e-4, budget 30s)"),
    );
}

#[test]
fn criterion_5_one_forward_pass_per_utterance() {
    let _g = serialize();
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        vocab_size: 8,
        feature_dim: 8,
        train_size: 5,
        dev_size: 1,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec, 505).expect("valid spec");
    let model_cfg = ModelConfig {
        feature_dim: 8,
        width: 16,
        heads: 2,
        ff_hidden: 32,
        encoder_blocks: 1,
        lm_blocks: 1,
        vocab_size: data.vocab.size(),
        fusion_weight: 0.3,
    };
    let params = init_params(&model_cfg, 506).expect("valid model config");
    let cfg = DecodeConfig { beam_width: 10, ..DecodeConfig::default() };
    let mut clean = true;
    let mut detail = String::new();
    for (i, utt) in data.train.iter().enumerate() {
        let before = forward_pass_count();
        let inference = infer(&params, &utt.features).expect("forward pass");
        let after_infer = forward_pass_count();
        decode_utterance(&inference, &data.vocab, DecodeMode::Joint, &cfg).expect("joint decode");
        decode_utterance(&inference, &data.vocab, DecodeMode::Greedy, &cfg)
            .expect("greedy readout");
        let after_decode = forward_pass_count();
        if after_infer - before != 1 || after_decode != after_infer {
            clean = false;
            detail = format!(
                "utterance {i}: {} passes to infer, {} more during search",
                after_infer - before,
                after_decode - after_infer
            );
            break;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = clean && elapsed < 5.0;
    if clean {
        detail = format!(
            "exactly 1 forward pass per utterance, 0 during beam search (beam 10), {} utterances in {elapsed:.1}s (budget 5s)",
            data.train.len()
        );
    }
    report(5, "decode-cache-discipline", pass, &detail);
}

/// Shared recipe for the end-to-end criteria: the default synthetic task and
/// a model/schedule sized for a single desk CPU.
fn end_to_end_recipe() -> (SyntheticSpec, ModelConfig, TrainConfig) {
    let spec = SyntheticSpec::default();
    let model_cfg = ModelConfig {
        feature_dim: spec.feature_dim,
        width: 48,
        heads: 4,
        ff_hidden: 96,
        encoder_blocks: 2,
        lm_blocks: 1,
        vocab_size: spec.vocab_size,
        fusion_weight: 0.3,
    };
    let train_cfg =
        TrainConfig { steps: 12_000, label_smoothing: 0.1, seed: 7, ..TrainConfig::default() };
    (spec, model_cfg, train_cfg)
}

fn cer_of(
    run: &TrainRun,
    dev: &[narwhal::train::TrainUtterance],
    vocab: &Vocabulary,
    mode: DecodeMode,
    cfg: &DecodeConfig,
) -> f64 {
    let feats: Vec<Tensor> = dev.iter().map(|u| u.features.clone()).collect();
    let refs: Vec<Vec<TokenId>> = dev.iter().map(|u| u.target.clone()).collect();
    let hyps = decode_corpus(&run.params, &feats, vocab, mode, cfg).expect("decode runs");
    corpus_error_rate(&refs, &hyps).expect("aligned corpora").0
}

#[test]
fn criterion_6_end_to_end_training_reaches_target_error() {
    let _g = serialize();
    let t0 = Instant::now();
    let (spec, model_cfg, train_cfg) = end_to_end_recipe();
    let data = gen_synthetic(&spec, 42).expect("default spec");
    assert_eq!(data.train.len(), 2000, "criterion trains on 2000 utterances");
    assert_eq!(data.vocab.size(), 23, "20 real tokens plus 3 reserved");
    let train_set = prepare(&data.train, &data.vocab).expect("usable corpus");
    let dev = prepare(&data.dev, &data.vocab).expect("usable corpus");
    let run = train(&train_set, &data.vocab, &model_cfg, &train_cfg).expect("training runs");
    let diverged = run.diverged_at.is_some();

    let decode_cfg = DecodeConfig { beam_width: 10, mu: 0.3, ..DecodeConfig::default() };
    let greedy_cer = cer_of(&run, &dev, &data.vocab, DecodeMode::Greedy, &decode_cfg);
    let joint_cer = cer_of(&run, &dev, &data.vocab, DecodeMode::Joint, &decode_cfg);
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = !diverged && greedy_cer <= 0.05 && joint_cer <= greedy_cer && elapsed <= 900.0;
    report(
        6,
        "end-to-end-toy-task",
        pass,
        &format!("dev greedy CER {greedy_cer:.4} (target <= 0.05), joint CER {joint_cer:.4} (target <= greedy), total {elapsed:.0}s (budget 900s)"),
    );
}

#[test]
fn criterion_7_joint_cost_stays_within_bounds() {
    let _g = serialize();
    let t0 = Instant::now();
    // A briefly trained small model so the length estimates are realistic and
    // the beam search does representative work.
    let spec = SyntheticSpec {
        vocab_size: 12,
        feature_dim: 12,
        train_size: 200,
        dev_size: 30,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec, 707).expect("valid spec");
    let model_cfg = ModelConfig {
        feature_dim: 12,
        width: 24,
        heads: 4,
        ff_hidden: 48,
        encoder_blocks: 1,
        lm_blocks: 1,
        vocab_size: data.vocab.size(),
        fusion_weight: 0.3,
    };
    let train_set = prepare(&data.train, &data.vocab).expect("usable corpus");
    let train_cfg = TrainConfig { steps: 200, seed: 708, ..TrainConfig::default() };
    let run = train(&train_set, &data.vocab, &model_cfg, &train_cfg).expect("training runs");

    let features: Vec<Tensor> = data.dev.iter().map(|u| u.features.clone()).collect();
    let cfg = DecodeConfig { beam_width: 10, ..DecodeConfig::default() };
    let reportd = bench_decode(&run.params, &features, &data.vocab, &cfg).expect("bench runs");
    let n = reportd.utterances as u64;
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = reportd.ratio > 1.0
        && reportd.ratio <= 50.0
        && reportd.greedy_forward_passes == n
        && reportd.joint_forward_passes == n;
    report(
        7,
        "joint-over-greedy-cost",
        pass,
        &format!(
            "joint/greedy wall-time ratio {:.2} (bounds (1, 50]), forward passes per utterance: greedy {}, joint {} (target 1 each), {} utterances in {elapsed:.1}s",
            reportd.ratio,
            reportd.greedy_forward_passes as f64 / n as f64,
            reportd.joint_forward_passes as f64 / n as f64,
            n
        ),
    );
}

#[test]
fn criterion_8_runs_are_deterministic_and_checkpoints_stable() {
    let _g = serialize();
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        vocab_size: 10,
        feature_dim: 8,
        train_size: 150,
        dev_size: 40,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let model_cfg = ModelConfig {
        feature_dim: 8,
        width: 16,
        heads: 2,
        ff_hidden: 32,
        encoder_blocks: 1,
        lm_blocks: 1,
        vocab_size: 10,
        fusion_weight: 0.3,
    };
    let train_cfg = TrainConfig { steps: 250, seed: 808, ..TrainConfig::default() };
    let decode_cfg = DecodeConfig { beam_width: 10, mu: 0.3, ..DecodeConfig::default() };

    // Two end-to-end runs from the same seeds: generation, training, decode.
    let mut cers = Vec::new();
    let mut first_params = None;
    for _ in 0..2 {
        let data = gen_synthetic(&spec, 809).expect("valid spec");
        let train_set = prepare(&data.train, &data.vocab).expect("usable corpus");
        let dev = prepare(&data.dev, &data.vocab).expect("usable corpus");
        let run = train(&train_set, &data.vocab, &model_cfg, &train_cfg).expect("training runs");
        let greedy = cer_of(&run, &dev, &data.vocab, DecodeMode::Greedy, &decode_cfg);
        let joint = cer_of(&run, &dev, &data.vocab, DecodeMode::Joint, &decode_cfg);
        cers.push((greedy, joint));
        if first_params.is_none() {
            first_params = Some((run, data.vocab));
        }
    }
    let deterministic = cers[0] == cers[1];

    // Checkpoint round trip: save, load, save again, compare bytes.
    let (run, vocab) = first_params.expect("first run retained");
    let dir = tempfile::tempdir().expect("temp dir");
    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    save_checkpoint(&run.params, &vocab, &first).expect("checkpoint saves");
    let (loaded, loaded_vocab) = load_checkpoint(&first).expect("checkpoint loads");
    save_checkpoint(&loaded, &loaded_vocab, &second).expect("checkpoint saves again");
    let bytes_a = std::fs::read(&first).expect("first file readable");
    let bytes_b = std::fs::read(&second).expect("second file readable");
    let stable = bytes_a == bytes_b;

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = deterministic && stable;
    report(
        8,
        "determinism-and-serialization",
        pass,
        &format!(
            "seeded reruns: (greedy, joint) CER {:?} vs {:?} ({}), save->load->save {} over {} bytes, {elapsed:.1}s",
            cers[0],
            cers[1],
            if deterministic { "identical" } else { "distinct" },
            if stable { "byte-identical" } else { "byte-distinct" },
            bytes_a.len()
        ),
    );
}
