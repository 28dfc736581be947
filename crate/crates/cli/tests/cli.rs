//! End-to-end tests that drive the compiled `narwhal` binary: the full
//! gen-data -> train -> pretrain-lm -> decode -> eval -> bench pipeline, plus
//! the documented exit codes for malformed inputs and training divergence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use narwhal::tensor::Tensor;
use narwhal::train::dataset::{write_split, Utterance};
use narwhal::vocab::Vocabulary;
use tempfile::TempDir;

fn narwhal_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_narwhal"))
}

fn run(args: &[&str]) -> Output {
    narwhal_cmd().args(args).output().expect("binary launches")
}

/// Runs the binary, asserting success, and returns stdout.
fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Runs the binary, asserting the given nonzero exit code, and returns stderr.
fn run_expect_code(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {:?} should exit {}\nstdout: {}\nstderr: {}",
        args,
        code,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// A spec small enough that every pipeline stage finishes in well under a
/// second per invocation.
const TINY_SPEC: &str = r#"{
    "vocab_size": 8,
    "feature_dim": 8,
    "utterance_len": [2, 5],
    "train_size": 24,
    "dev_size": 6,
    "test_size": 6
}"#;

const TINY_TRAIN_CONFIG: &str = r#"{
    "model": {
        "feature_dim": 8,
        "width": 16,
        "heads": 2,
        "ff_hidden": 32,
        "encoder_blocks": 1,
        "lm_blocks": 1,
        "vocab_size": 8,
        "fusion_weight": 0.3
    },
    "train": { "steps": 25, "batch_size": 4, "seed": 3 }
}"#;

/// Generates the tiny corpus under `root/data` and returns that path.
fn gen_tiny_data(root: &Path) -> PathBuf {
    let spec_path = root.join("spec.json");
    std::fs::write(&spec_path, TINY_SPEC).unwrap();
    let data_dir = root.join("data");
    let stdout = run_ok(&[
        "gen-data",
        "--spec",
        s(&spec_path),
        "--seed",
        "11",
        "--out",
        s(&data_dir),
    ]);
    assert!(stdout.contains("24 utterances"), "train split size echoed: {stdout}");
    data_dir
}

/// Trains on the tiny corpus and returns the checkpoint path.
fn train_tiny(root: &Path, data_dir: &Path) -> PathBuf {
    let config_path = root.join("train.json");
    std::fs::write(&config_path, TINY_TRAIN_CONFIG).unwrap();
    let ckpt = root.join("model.ckpt");
    let stdout = run_ok(&[
        "train",
        "--data",
        s(&data_dir.join("train")),
        "--config",
        s(&config_path),
        "--out",
        s(&ckpt),
    ]);
    assert!(stdout.contains("trained 25 steps"), "step count echoed: {stdout}");
    ckpt
}

fn grab_metric(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
        .unwrap_or_else(|| panic!("missing `{key}` in:\n{stdout}"))
}

#[test]
fn pipeline_generates_trains_decodes_and_scores() {
    let tmp = TempDir::new().unwrap();
    let data_dir = gen_tiny_data(tmp.path());
    for split in ["train", "dev", "test"] {
        for file in ["utts.txt", "utts.feat", "vocab.txt"] {
            assert!(data_dir.join(split).join(file).is_file(), "{split}/{file} written");
        }
    }
    let ckpt = train_tiny(tmp.path(), &data_dir);
    let dev = data_dir.join("dev");

    let greedy_hyp = tmp.path().join("greedy.txt");
    run_ok(&[
        "decode",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&dev),
        "--mode",
        "greedy",
        "--out",
        s(&greedy_hyp),
    ]);
    let joint_hyp = tmp.path().join("joint.txt");
    run_ok(&[
        "decode",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&dev),
        "--mode",
        "joint",
        "--beam",
        "5",
        "--mu",
        "0.3",
        "--out",
        s(&joint_hyp),
    ]);
    let hyp_text = std::fs::read_to_string(&greedy_hyp).unwrap();
    assert_eq!(hyp_text.lines().count(), 6, "one hypothesis line per dev utterance");
    assert!(hyp_text.ends_with('\n'));

    for hyp in [&greedy_hyp, &joint_hyp] {
        let stdout =
            run_ok(&["eval", "--ref", s(&dev.join("utts.txt")), "--hyp", s(hyp)]);
        assert_eq!(grab_metric(&stdout, "utterances") as usize, 6);
        let cer = grab_metric(&stdout, "CER");
        assert!(cer.is_finite() && cer >= 0.0, "CER parses: {stdout}");
        for key in ["reference-tokens", "substitutions", "insertions", "deletions"] {
            grab_metric(&stdout, key);
        }
    }

    let stdout = run_ok(&["bench", "--ckpt", s(&ckpt), "--data", s(&dev), "--beam", "5"]);
    assert_eq!(grab_metric(&stdout, "utterances") as usize, 6);
    assert_eq!(grab_metric(&stdout, "greedy-forward-passes") as usize, 6);
    assert_eq!(grab_metric(&stdout, "joint-forward-passes") as usize, 6);
    assert!(grab_metric(&stdout, "joint/greedy-ratio") > 0.0);
}

#[test]
fn pretraining_updates_a_checkpoint_that_still_decodes() {
    let tmp = TempDir::new().unwrap();
    let data_dir = gen_tiny_data(tmp.path());
    let ckpt = train_tiny(tmp.path(), &data_dir);

    // Mix of in-vocabulary text, an unknown word (maps to unk), and a blank
    // line (skipped).
    let corpus = tmp.path().join("corpus.txt");
    std::fs::write(&corpus, "t00 t01 t02\nt03 never-seen t04\n\nt01 t01 t00\n").unwrap();
    let pretrained = tmp.path().join("pretrained.ckpt");
    let stdout = run_ok(&[
        "pretrain-lm",
        "--corpus",
        s(&corpus),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&pretrained),
    ]);
    assert!(stdout.contains("pretrained"), "progress echoed: {stdout}");

    let before = std::fs::read(&ckpt).unwrap();
    let after = std::fs::read(&pretrained).unwrap();
    assert_eq!(before.len(), after.len(), "same tensors, same layout");
    assert_ne!(before, after, "pretraining moved the linguistic parameters");

    let hyp = tmp.path().join("hyp.txt");
    run_ok(&[
        "decode",
        "--ckpt",
        s(&pretrained),
        "--data",
        s(&data_dir.join("dev")),
        "--mode",
        "joint",
        "--out",
        s(&hyp),
    ]);
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), 6);
}

#[test]
fn eval_reports_the_exact_edit_breakdown() {
    let tmp = TempDir::new().unwrap();
    let refs = tmp.path().join("ref.txt");
    let hyps = tmp.path().join("hyp.txt");
    // Line 1: one substitution. Line 2: one insertion. Five reference tokens.
    std::fs::write(&refs, "a b c\nd e\n").unwrap();
    std::fs::write(&hyps, "a x c\nd e f\n").unwrap();
    let stdout = run_ok(&["eval", "--ref", s(&refs), "--hyp", s(&hyps)]);
    assert_eq!(grab_metric(&stdout, "utterances") as usize, 2);
    assert_eq!(grab_metric(&stdout, "reference-tokens") as usize, 5);
    assert_eq!(grab_metric(&stdout, "substitutions") as usize, 1);
    assert_eq!(grab_metric(&stdout, "insertions") as usize, 1);
    assert_eq!(grab_metric(&stdout, "deletions") as usize, 0);
    assert!((grab_metric(&stdout, "CER") - 0.4).abs() < 1e-9);
}

#[test]
fn malformed_spec_json_exits_2() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, "{not json").unwrap();
    let out = tmp.path().join("data");
    let stderr =
        run_expect_code(&["gen-data", "--spec", s(&spec), "--seed", "1", "--out", s(&out)], 2);
    assert!(stderr.contains("spec"), "names the offending file: {stderr}");
}

#[test]
fn unknown_spec_field_exits_2() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"bogus_field": 1}"#).unwrap();
    let out = tmp.path().join("data");
    run_expect_code(&["gen-data", "--spec", s(&spec), "--seed", "1", "--out", s(&out)], 2);
}

#[test]
fn corrupt_feature_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let data_dir = gen_tiny_data(tmp.path());
    let feat = data_dir.join("train").join("utts.feat");
    let mut bytes = std::fs::read(&feat).unwrap();
    bytes[..8].copy_from_slice(b"GARBAGE!");
    std::fs::write(&feat, bytes).unwrap();

    let config = tmp.path().join("train.json");
    std::fs::write(&config, "{}").unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let stderr = run_expect_code(
        &[
            "train",
            "--data",
            s(&data_dir.join("train")),
            "--config",
            s(&config),
            "--out",
            s(&ckpt),
        ],
        2,
    );
    assert!(!stderr.is_empty(), "failure surfaced on stderr");
}

#[test]
fn vocabulary_mismatch_between_checkpoint_and_data_exits_2() {
    let tmp = TempDir::new().unwrap();
    let data_dir = gen_tiny_data(tmp.path());
    let ckpt = train_tiny(tmp.path(), &data_dir);

    // Same layout, different vocabulary: one extra real token.
    let other_spec = tmp.path().join("other_spec.json");
    std::fs::write(
        &other_spec,
        r#"{"vocab_size": 9, "feature_dim": 8, "train_size": 4, "dev_size": 4, "test_size": 4}"#,
    )
    .unwrap();
    let other_data = tmp.path().join("other_data");
    run_ok(&["gen-data", "--spec", s(&other_spec), "--seed", "11", "--out", s(&other_data)]);

    let hyp = tmp.path().join("hyp.txt");
    let stderr = run_expect_code(
        &[
            "decode",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&other_data.join("dev")),
            "--mode",
            "greedy",
            "--out",
            s(&hyp),
        ],
        2,
    );
    assert!(stderr.contains("vocabular"), "explains the mismatch: {stderr}");
}

#[test]
fn non_finite_features_exit_4_but_save_last_good_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("poisoned");
    std::fs::create_dir_all(&dir).unwrap();
    let vocab = Vocabulary::from_tokens(
        ["<blank>", "<unk>", "a", "b", "<eos>"].iter().map(|t| t.to_string()).collect(),
    )
    .unwrap();
    vocab.save(&dir.join("vocab.txt")).unwrap();
    let mut features = Tensor::zeros(vec![4, 4]);
    features.data_mut()[5] = f64::INFINITY;
    let utts = vec![Utterance { features, transcript: vec!["a".into(), "b".into()] }];
    write_split(&dir, "utts", &utts).unwrap();

    let config = tmp.path().join("train.json");
    std::fs::write(
        &config,
        r#"{
            "model": {
                "feature_dim": 4, "width": 8, "heads": 2, "ff_hidden": 16,
                "encoder_blocks": 1, "lm_blocks": 1, "vocab_size": 5,
                "fusion_weight": 0.3
            },
            "train": { "steps": 5, "batch_size": 1 }
        }"#,
    )
    .unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let stderr = run_expect_code(
        &["train", "--data", s(&dir), "--config", s(&config), "--out", s(&ckpt)],
        4,
    );
    assert!(stderr.contains("step 0"), "divergence step named: {stderr}");
    assert!(ckpt.is_file(), "last-good parameters still saved");
}

#[test]
fn unknown_decode_mode_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("hyp.txt");
    run_expect_code(
        &[
            "decode",
            "--ckpt",
            "nope.ckpt",
            "--data",
            "nowhere",
            "--mode",
            "fancy",
            "--out",
            s(&out),
        ],
        2,
    );
}

#[test]
fn missing_input_file_exits_1() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("train.json");
    std::fs::write(&config, "{}").unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    run_expect_code(
        &[
            "train",
            "--data",
            s(&tmp.path().join("no_such_dir")),
            "--config",
            s(&config),
            "--out",
            s(&ckpt),
        ],
        1,
    );
}
