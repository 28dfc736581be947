//! Command-line driver: dataset generation, training, masked pretraining,
//! decoding, scoring, and a decode benchmark.
//!
//! Exit codes: 0 success, 2 malformed input (bad file formats, and clap's own
//! usage errors), 3 violated call contracts, 4 training divergence, 1 for
//! everything else.
//!
//! A dataset directory is one split: `utts.txt` (one transcript per line),
//! `utts.feat` (the binary feature records), and `vocab.txt`. `gen-data`
//! writes `train/`, `dev/`, and `test/` split directories under its output
//! root.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use narwhal::decoder::DecodeConfig;
use narwhal::error::{Error, Result};
use narwhal::metrics::corpus_error_rate;
use narwhal::model::ModelConfig;
use narwhal::pipeline::{bench_decode, decode_corpus, tokens_to_line, DecodeMode};
use narwhal::train::checkpoint::{load_checkpoint, save_checkpoint};
use narwhal::train::dataset::{read_split, read_transcripts, write_split, Utterance};
use narwhal::train::mlm::{mlm_pretrain, MlmConfig};
use narwhal::train::synth::{gen_synthetic, SyntheticSpec};
use narwhal::train::{prepare, train, TrainConfig};
use narwhal::vocab::Vocabulary;

const SPLIT_NAME: &str = "utts";

#[derive(Parser)]
#[command(name = "narwhal", version, about = "Non-autoregressive speech recognizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (train/, dev/, test/ split directories).
    GenData {
        /// JSON generation spec; `{}` selects all defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a split directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional "model" and "train" sections; `{}` selects
        /// defaults sized to the data.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pretraining of the linguistic branch on a text corpus.
    PretrainLm {
        /// Text file, one transcript per line; empty lines are skipped.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split directory into a hypothesis file.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// "greedy" or "joint".
        #[arg(long)]
        mode: DecodeMode,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        /// CTC weight inside the joint score.
        #[arg(long, default_value_t = 0.3)]
        mu: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token error rate of a hypothesis file against a reference file.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Wall-time comparison of greedy and joint decoding on a split.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        beam: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Format(_) => 2,
                Error::Contract(_) => 3,
                Error::Training(_) => 4,
                _ => 1,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, seed, out } => cmd_gen_data(&spec, seed, &out),
        Cmd::Train { data, config, out } => cmd_train(&data, &config, &out),
        Cmd::PretrainLm { corpus, ckpt, out } => cmd_pretrain_lm(&corpus, &ckpt, &out),
        Cmd::Decode { ckpt, data, mode, beam, mu, out } => {
            cmd_decode(&ckpt, &data, mode, beam, mu, &out)
        }
        Cmd::Eval { reference, hyp } => cmd_eval(&reference, &hyp),
        Cmd::Bench { ckpt, data, beam } => cmd_bench(&ckpt, &data, beam),
    }
}

/// One split directory: transcripts + features + the vocabulary they use.
fn load_split_dir(dir: &Path) -> Result<(Vocabulary, Vec<Utterance>)> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let utterances = read_split(dir, SPLIT_NAME)?;
    Ok((vocab, utterances))
}

fn cmd_gen_data(spec_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("spec {}: {e}", spec_path.display())))?;
    let data = gen_synthetic(&spec, seed)?;
    for (name, split) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        data.vocab.save(&dir.join("vocab.txt"))?;
        write_split(&dir, SPLIT_NAME, split)?;
        println!("{}: {} utterances", dir.display(), split.len());
    }
    Ok(())
}

/// Training config file: both sections optional. A missing model section is
/// sized from the data (feature dim, vocabulary) with library defaults for
/// the rest.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn cmd_train(data_dir: &Path, config_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let file_cfg: TrainFileConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("config {}: {e}", config_path.display())))?;
    let (vocab, utterances) = load_split_dir(data_dir)?;
    if utterances.is_empty() {
        return Err(Error::Argument(format!("{} holds no utterances", data_dir.display())));
    }
    let model_cfg = file_cfg
        .model
        .unwrap_or_else(|| ModelConfig::toy(utterances[0].features.cols(), vocab.size()));
    let train_cfg = file_cfg.train.unwrap_or_default();

    let examples = prepare(&utterances, &vocab)?;
    let t0 = Instant::now();
    let run = train(&examples, &vocab, &model_cfg, &train_cfg)?;
    save_checkpoint(&run.params, &vocab, out)?;
    if let Some(step) = run.diverged_at {
        return Err(Error::Training(format!(
            "non-finite numbers at step {step}; last-good parameters saved to {}",
            out.display()
        )));
    }
    let last = run.history.last().expect("at least one step ran");
    println!(
        "trained {} steps in {:.1}s; final loss {:.4} (ce_fused {:.4}, ce_prelim {:.4}, ctc {:.4})",
        run.history.len(),
        t0.elapsed().as_secs_f64(),
        last.total,
        last.ce_fused,
        last.ce_prelim,
        last.ctc
    );
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_pretrain_lm(corpus_path: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (params, vocab) = load_checkpoint(ckpt)?;
    let corpus: Vec<_> = read_transcripts(corpus_path)?
        .into_iter()
        .filter(|line| !line.is_empty())
        .map(|line| line.iter().map(|w| vocab.id_or_unk(w)).collect::<Vec<_>>())
        .collect();
    if corpus.is_empty() {
        return Err(Error::Argument(format!(
            "{} holds no nonempty lines",
            corpus_path.display()
        )));
    }
    let cfg = MlmConfig::default();
    let t0 = Instant::now();
    let run = mlm_pretrain(params, &corpus, &vocab, &cfg)?;
    save_checkpoint(&run.params, &vocab, out)?;
    if let Some(step) = run.diverged_at {
        return Err(Error::Training(format!(
            "non-finite numbers at step {step}; last-good parameters saved to {}",
            out.display()
        )));
    }
    println!(
        "pretrained {} steps in {:.1}s; final masked CE {:.4}",
        run.history.len(),
        t0.elapsed().as_secs_f64(),
        run.history.last().copied().unwrap_or(0.0)
    );
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// Refuses to pair a checkpoint with a split generated for a different
/// vocabulary.
fn check_vocab_match(ckpt_vocab: &Vocabulary, data_vocab: &Vocabulary) -> Result<()> {
    if ckpt_vocab.sha256_hex() != data_vocab.sha256_hex() {
        return Err(Error::Format(
            "checkpoint and dataset were built for different vocabularies".into(),
        ));
    }
    Ok(())
}

fn cmd_decode(
    ckpt: &Path,
    data_dir: &Path,
    mode: DecodeMode,
    beam: usize,
    mu: f64,
    out: &Path,
) -> Result<()> {
    let (params, vocab) = load_checkpoint(ckpt)?;
    let (data_vocab, utterances) = load_split_dir(data_dir)?;
    check_vocab_match(&vocab, &data_vocab)?;
    let cfg = DecodeConfig { beam_width: beam, mu, ..DecodeConfig::default() };
    cfg.validate()?;
    let features: Vec<_> = utterances.into_iter().map(|u| u.features).collect();
    let t0 = Instant::now();
    let hyps = decode_corpus(&params, &features, &vocab, mode, &cfg)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let lines: Vec<String> = hyps.iter().map(|h| tokens_to_line(&vocab, h)).collect();
    let mut body = lines.join("\n");
    body.push('\n');
    std::fs::write(out, body)?;
    println!(
        "decoded {} utterances ({mode}) in {elapsed:.1}s; hypotheses written to {}",
        hyps.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(reference: &Path, hyp: &Path) -> Result<()> {
    let refs = read_transcripts(reference)?;
    let hyps = read_transcripts(hyp)?;
    let (rate, counts) = corpus_error_rate(&refs, &hyps)?;
    let ref_tokens: usize = refs.iter().map(Vec::len).sum();
    println!("utterances {}", refs.len());
    println!("reference-tokens {ref_tokens}");
    println!("substitutions {}", counts.substitutions);
    println!("insertions {}", counts.insertions);
    println!("deletions {}", counts.deletions);
    println!("CER {rate:.6}");
    Ok(())
}

fn cmd_bench(ckpt: &Path, data_dir: &Path, beam: usize) -> Result<()> {
    let (params, vocab) = load_checkpoint(ckpt)?;
    let (data_vocab, utterances) = load_split_dir(data_dir)?;
    check_vocab_match(&vocab, &data_vocab)?;
    let cfg = DecodeConfig { beam_width: beam, ..DecodeConfig::default() };
    cfg.validate()?;
    let features: Vec<_> = utterances.into_iter().map(|u| u.features).collect();
    let report = bench_decode(&params, &features, &vocab, &cfg)?;
    let per = 1e3 / report.utterances as f64;
    println!("utterances {}", report.utterances);
    println!("greedy-total-s {:.3}", report.greedy_total_s);
    println!("greedy-mean-ms {:.3}", report.greedy_total_s * per);
    println!("joint-total-s {:.3}", report.joint_total_s);
    println!("joint-mean-ms {:.3}", report.joint_total_s * per);
    println!("joint/greedy-ratio {:.3}", report.ratio);
    println!("greedy-forward-passes {}", report.greedy_forward_passes);
    println!("joint-forward-passes {}", report.joint_forward_passes);
    Ok(())
}
