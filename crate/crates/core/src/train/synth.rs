//! Synthetic speech-like corpus: every token owns a fixed random prototype
//! vector; an utterance plays each token's prototype for a few frames under
//! Gaussian noise, with short silent gaps between tokens and optional silence
//! at each end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

use super::dataset::Utterance;

fn default_vocab_size() -> usize {
    23
}
fn default_feature_dim() -> usize {
    16
}
fn default_frames_per_token() -> [usize; 2] {
    [2, 4]
}
fn default_noise_std() -> f64 {
    0.3
}
fn default_gap_frames() -> usize {
    1
}
fn default_utterance_len() -> [usize; 2] {
    [3, 12]
}
fn default_silence_max() -> usize {
    1
}
fn default_train_size() -> usize {
    2000
}
fn default_eval_size() -> usize {
    200
}

/// Generation parameters; all fields have defaults so a spec file of `{}`
/// yields the standard task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total vocabulary size including blank, unk, and eos.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Inclusive frame-count range a token is stretched over.
    #[serde(default = "default_frames_per_token")]
    pub frames_per_token: [usize; 2],
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Silence frames between consecutive tokens. This is the acoustic
    /// boundary cue that keeps a repeated token distinguishable from one
    /// stretched token; with `0`, those two readings produce identically
    /// distributed features and no model can separate them.
    #[serde(default = "default_gap_frames")]
    pub gap_frames: usize,
    /// Inclusive token-count range per utterance.
    #[serde(default = "default_utterance_len")]
    pub utterance_len: [usize; 2],
    /// Maximum silence frames independently at each end.
    #[serde(default = "default_silence_max")]
    pub silence_max: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_eval_size")]
    pub dev_size: usize,
    #[serde(default = "default_eval_size")]
    pub test_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let [f_lo, f_hi] = self.frames_per_token;
        // Two frames per token guarantee T >= 2L, which keeps every CTC
        // alignment feasible even for fully repeated transcripts.
        if f_lo < 2 || f_hi < f_lo {
            return Err(Error::Config(
                "frames_per_token must be an increasing range starting at 2 or more".into(),
            ));
        }
        let [u_lo, u_hi] = self.utterance_len;
        if u_lo < 1 || u_hi < u_lo {
            return Err(Error::Config("utterance_len must be a positive range".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::Config("every split must be nonempty".into()));
        }
        Ok(())
    }
}

/// A generated corpus: vocabulary plus the three splits.
#[derive(Debug)]
pub struct SyntheticData {
    pub vocab: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn real_token_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i:02}")).collect()
}

fn sample_utterance(
    spec: &SyntheticSpec,
    prototypes: &[Vec<f64>],
    names: &[String],
    rng: &mut ChaCha8Rng,
) -> Utterance {
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let len = rng.gen_range(spec.utterance_len[0]..=spec.utterance_len[1]);
    let mut transcript = Vec::with_capacity(len);
    let mut rows: Vec<f64> = Vec::new();
    let dim = spec.feature_dim;
    let silence = vec![0.0; dim];
    let emit = |proto: &[f64], rng: &mut ChaCha8Rng, rows: &mut Vec<f64>| {
        for d in 0..dim {
            let n = if spec.noise_std == 0.0 { 0.0 } else { noise.sample(rng) };
            rows.push(proto[d] + n);
        }
    };
    for _ in 0..rng.gen_range(0..=spec.silence_max) {
        emit(&silence, rng, &mut rows);
    }
    for i in 0..len {
        if i > 0 {
            for _ in 0..spec.gap_frames {
                emit(&silence, rng, &mut rows);
            }
        }
        let k = rng.gen_range(0..prototypes.len());
        transcript.push(names[k].clone());
        for _ in 0..rng.gen_range(spec.frames_per_token[0]..=spec.frames_per_token[1]) {
            emit(&prototypes[k], rng, &mut rows);
        }
    }
    for _ in 0..rng.gen_range(0..=spec.silence_max) {
        emit(&silence, rng, &mut rows);
    }
    let frames = rows.len() / dim;
    Utterance {
        features: Tensor::matrix(frames, dim, rows).expect("consistent row construction"),
        transcript,
    }
}

/// Deterministic corpus generation: one seed fixes prototypes and all three
/// splits.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_real = spec.vocab_size - 3;
    let names = real_token_names(n_real);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..n_real)
        .map(|_| (0..spec.feature_dim).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();

    let mut tokens = vec!["<blank>".to_string(), "<unk>".to_string()];
    tokens.extend(names.iter().cloned());
    tokens.push("<eos>".to_string());
    let vocab = Vocabulary::from_tokens(tokens)?;

    let split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..n).map(|_| sample_utterance(spec, &prototypes, &names, rng)).collect()
    };
    let train = split(spec.train_size, &mut rng);
    let dev = split(spec.dev_size, &mut rng);
    let test = split(spec.test_size, &mut rng);
    Ok(SyntheticData { vocab, train, dev, test })
}
