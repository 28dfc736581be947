//! Shared benchmark fixtures: a small randomly initialized model over a
//! synthetic corpus. Benchmarks measure wall time of the inference machinery,
//! which does not depend on parameter quality, so no training phase is needed.

use narwhal::model::{init_params, ModelConfig, ModelParams};
use narwhal::tensor::Tensor;
use narwhal::train::synth::{gen_synthetic, SyntheticSpec};
use narwhal::vocab::Vocabulary;

pub struct Fixture {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub features: Vec<Tensor>,
}

/// A model plus `utterances` feature matrices from the default synthetic
/// task, all seeded, so timings are comparable across runs.
pub fn fixture(utterances: usize) -> Fixture {
    let spec = SyntheticSpec {
        train_size: utterances,
        dev_size: 1,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec, 17).expect("default spec is valid");
    let cfg = ModelConfig {
        feature_dim: spec.feature_dim,
        width: 48,
        heads: 4,
        ff_hidden: 96,
        encoder_blocks: 2,
        lm_blocks: 1,
        vocab_size: data.vocab.size(),
        fusion_weight: 0.3,
    };
    let params = init_params(&cfg, 9).expect("valid model config");
    Fixture {
        params,
        vocab: data.vocab,
        features: data.train.into_iter().map(|u| u.features).collect(),
    }
}
