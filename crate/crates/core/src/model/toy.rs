// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random-weight models for tests, demos and the CLI `--toy` mode.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::tokenizer::byte_level_vocab;
use super::{ModelBundle, ModelConfig, Tensor, TensorMap, TokenId, TokenizerTables, END_OF_TEXT};

/// Byte-level tokenizer with no merges: 256 byte tokens plus end-of-text (257 ids).
pub fn byte_tokenizer() -> TokenizerTables {
    let mut vocab: HashMap<String, TokenId> = byte_level_vocab();
    vocab.insert(END_OF_TEXT.to_string(), 256);
    TokenizerTables::new(vocab, Vec::new()).expect("byte vocab is well formed")
}

fn gaussian(rng: &mut StdRng, std: f32) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

/// Random weights for `config` with the given tokenizer.
pub fn random_bundle_with(
    config: ModelConfig,
    tokenizer: TokenizerTables,
    seed: u64,
) -> crate::Result<ModelBundle> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut map = TensorMap::new();
    for (name, shape) in config.tensor_schema() {
        let n: usize = shape.iter().product();
        let (offset, std) = if name.ends_with("ln_1.weight")
            || name.ends_with("ln_2.weight")
            || name == "ln_f.weight"
        {
            (1.0, 0.1)
        } else if name.ends_with(".bias") {
            (0.0, 0.1)
        } else if name == "wte.weight" {
            (0.0, 0.5)
        } else if name == "wpe.weight" {
            (0.0, 0.2)
        } else {
            (0.0, 0.4)
        };
        let data = (0..n).map(|_| offset + gaussian(&mut rng, std)).collect();
        map.insert(name, Tensor { shape, data });
    }
    ModelBundle::from_tensors(config, tokenizer, map)
}

/// Random-weight model over [`byte_tokenizer`]. `config.vocab_size` must be 257.
pub fn random_bundle(config: ModelConfig, seed: u64) -> ModelBundle {
    assert_eq!(config.vocab_size, 257, "byte tokenizer has 257 tokens");
    random_bundle_with(config, byte_tokenizer(), seed).expect("schema-complete random weights")
}

/// Random model whose attention and MLP output projections (weights and
/// biases) are all zero, so every block is the identity on the residual stream.
pub fn zero_branch_bundle(config: ModelConfig, seed: u64) -> ModelBundle {
    let base = random_bundle(config, seed);
    let mut map = base.to_tensor_map();
    for (name, t) in map.iter_mut() {
        if name.contains("c_proj") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    ModelBundle::from_tensors(config, base.tokenizer().clone(), map)
        .expect("schema-complete random weights")
}
