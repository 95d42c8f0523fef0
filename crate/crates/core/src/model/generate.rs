// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::engine::{ForwardHooks, KvCache, LogitRows, NoHooks};
use super::linalg::{argmax, softmax};
use super::{ModelBundle, TokenId, TokenSequence};
use crate::error::{Error, Result};

/// Next-token selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax; ties go to the smaller token id.
    Greedy,
    /// Temperature sampling from a seeded RNG. Not used by any evaluation path.
    Sample { temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// Incremental decoding through the KV cache. When false every step
    /// recomputes the whole sequence (and hooks see every position again).
    pub use_cache: bool,
    pub decoding: Decoding,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 20,
            use_cache: true,
            decoding: Decoding::Greedy,
        }
    }
}

/// Autoregressive generation. Returns prompt followed by the new tokens;
/// stops after `max_new_tokens` or right after emitting end-of-text.
pub fn generate(
    bundle: &ModelBundle,
    prompt: &TokenSequence,
    opts: &GenerateOptions,
    hooks: &mut dyn ForwardHooks,
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must not be empty".into()));
    }
    let max = bundle.config().max_positions;
    if prompt.len() + opts.max_new_tokens > max {
        return Err(Error::ContextOverflow {
            requested: prompt.len() + opts.max_new_tokens,
            max,
        });
    }
    if opts.max_new_tokens == 0 {
        return Ok(prompt.clone());
    }
    let mut rng = match opts.decoding {
        Decoding::Sample { temperature, seed } => {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::InvalidArgument("temperature must be > 0".into()));
            }
            Some(StdRng::seed_from_u64(seed))
        }
        Decoding::Greedy => None,
    };
    let eot = bundle.end_of_text();

    let mut ids: Vec<TokenId> = prompt.ids.clone();
    let mut cache = KvCache::new(bundle.config());
    let mut pending: Vec<TokenId> = ids.clone();
    for _ in 0..opts.max_new_tokens {
        if !opts.use_cache {
            cache = KvCache::new(bundle.config());
            pending = ids.clone();
        }
        let out = bundle.forward_hooked(&pending, &mut cache, hooks, LogitRows::Last)?;
        let mut logits = out.logits.row(0).to_vec();
        let next = match (&mut rng, opts.decoding) {
            (Some(rng), Decoding::Sample { temperature, .. }) => {
                logits.iter_mut().for_each(|l| *l /= temperature);
                softmax(&mut logits);
                sample(&logits, rng.gen::<f32>())
            }
            _ => argmax(&logits),
        } as TokenId;
        ids.push(next);
        pending = vec![next];
        if Some(next) == eot {
            break;
        }
    }
    bundle.sequence(ids)
}

fn sample(probs: &[f32], u: f32) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Deterministic greedy decoding with the KV cache.
pub fn generate_greedy(
    bundle: &ModelBundle,
    prompt: &TokenSequence,
    max_new_tokens: usize,
    hooks: Option<&mut dyn ForwardHooks>,
) -> Result<TokenSequence> {
    let opts = GenerateOptions {
        max_new_tokens,
        ..GenerateOptions::default()
    };
    match hooks {
        Some(h) => generate(bundle, prompt, &opts, h),
        None => generate(bundle, prompt, &opts, &mut NoHooks),
    }
}
