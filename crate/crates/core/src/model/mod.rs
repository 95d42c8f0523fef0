// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-2-architecture inference substrate: configuration, tokenizer, weight
//! loading, the forward pass with hook points, and greedy decoding.

mod config;
mod engine;
mod generate;
pub mod linalg;
pub mod tensors;
mod tokenizer;
pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use engine::{ForwardHooks, ForwardOutput, KvCache, LogitRows, NoHooks, ShapeAudit};
pub use generate::{generate, generate_greedy, Decoding, GenerateOptions};
pub use linalg::Matrix;
pub use tensors::{Tensor, TensorMap};
pub use tokenizer::{TokenId, TokenSequence, TokenizerTables, END_OF_TEXT};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

#[derive(Debug, Clone)]
pub(crate) struct BlockWeights {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub qkv_weight: Vec<f32>,
    pub qkv_bias: Vec<f32>,
    pub attn_proj_weight: Vec<f32>,
    pub attn_proj_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
    pub mlp_proj_weight: Vec<f32>,
    pub mlp_proj_bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub(crate) struct Weights {
    pub token_embedding: Vec<f32>,
    pub position_embedding: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
}

/// Immutable weights, configuration and tokenizer of one model.
///
/// Shareable across threads; every inference session borrows it read-only.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    tokenizer: TokenizerTables,
    pub(crate) weights: Weights,
    fingerprint: String,
}

/// Map a checkpoint tensor name onto the schema name, or `None` for tensors
/// the engine does not use (tied unembedding, causal-mask buffers).
fn canonical_name(name: &str) -> Option<&str> {
    let name = name.strip_prefix("transformer.").unwrap_or(name);
    if name == "lm_head.weight" || name.ends_with(".attn.bias") || name.ends_with(".attn.masked_bias")
    {
        return None;
    }
    Some(name)
}

impl ModelBundle {
    /// Assemble a bundle from named tensors, validating the full schema.
    pub fn from_tensors(
        config: ModelConfig,
        tokenizer: TokenizerTables,
        mut tensors: TensorMap,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::SchemaViolation(format!(
                "tokenizer has {} tokens but config vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&config)?);
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::SchemaViolation(format!("missing tensor `{name}`")))?;
            if t.shape != shape {
                return Err(Error::SchemaViolation(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::CorruptWeights(name.to_string()));
            }
            hasher.update(name.as_bytes());
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
            Ok(t.data)
        };

        let d = config.d_model;
        let ff = config.d_ff();
        let token_embedding = take("wte.weight", &[config.vocab_size, d])?;
        let position_embedding = take("wpe.weight", &[config.max_positions, d])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let p = format!("h.{layer}.");
            blocks.push(BlockWeights {
                ln1_gain: take(&format!("{p}ln_1.weight"), &[d])?,
                ln1_bias: take(&format!("{p}ln_1.bias"), &[d])?,
                qkv_weight: take(&format!("{p}attn.c_attn.weight"), &[d, 3 * d])?,
                qkv_bias: take(&format!("{p}attn.c_attn.bias"), &[3 * d])?,
                attn_proj_weight: take(&format!("{p}attn.c_proj.weight"), &[d, d])?,
                attn_proj_bias: take(&format!("{p}attn.c_proj.bias"), &[d])?,
                ln2_gain: take(&format!("{p}ln_2.weight"), &[d])?,
                ln2_bias: take(&format!("{p}ln_2.bias"), &[d])?,
                fc_weight: take(&format!("{p}mlp.c_fc.weight"), &[d, ff])?,
                fc_bias: take(&format!("{p}mlp.c_fc.bias"), &[ff])?,
                mlp_proj_weight: take(&format!("{p}mlp.c_proj.weight"), &[ff, d])?,
                mlp_proj_bias: take(&format!("{p}mlp.c_proj.bias"), &[d])?,
            });
        }
        let lnf_gain = take("ln_f.weight", &[d])?;
        let lnf_bias = take("ln_f.bias", &[d])?;

        Ok(ModelBundle {
            config,
            tokenizer,
            weights: Weights {
                token_embedding,
                position_embedding,
                blocks,
                lnf_gain,
                lnf_bias,
            },
            fingerprint: hex::encode(hasher.finalize()),
        })
    }

    /// Export the weights under their schema names.
    pub fn to_tensor_map(&self) -> TensorMap {
        let cfg = &self.config;
        let w = &self.weights;
        let mut map = TensorMap::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f32]| {
            map.insert(name, Tensor { shape, data: data.to_vec() });
        };
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        put("wte.weight".into(), vec![cfg.vocab_size, d], &w.token_embedding);
        put("wpe.weight".into(), vec![cfg.max_positions, d], &w.position_embedding);
        for (layer, b) in w.blocks.iter().enumerate() {
            let p = format!("h.{layer}.");
            put(format!("{p}ln_1.weight"), vec![d], &b.ln1_gain);
            put(format!("{p}ln_1.bias"), vec![d], &b.ln1_bias);
            put(format!("{p}attn.c_attn.weight"), vec![d, 3 * d], &b.qkv_weight);
            put(format!("{p}attn.c_attn.bias"), vec![3 * d], &b.qkv_bias);
            put(format!("{p}attn.c_proj.weight"), vec![d, d], &b.attn_proj_weight);
            put(format!("{p}attn.c_proj.bias"), vec![d], &b.attn_proj_bias);
            put(format!("{p}ln_2.weight"), vec![d], &b.ln2_gain);
            put(format!("{p}ln_2.bias"), vec![d], &b.ln2_bias);
            put(format!("{p}mlp.c_fc.weight"), vec![d, ff], &b.fc_weight);
            put(format!("{p}mlp.c_fc.bias"), vec![ff], &b.fc_bias);
            put(format!("{p}mlp.c_proj.weight"), vec![ff, d], &b.mlp_proj_weight);
            put(format!("{p}mlp.c_proj.bias"), vec![d], &b.mlp_proj_bias);
        }
        put("ln_f.weight".into(), vec![d], &w.lnf_gain);
        put("ln_f.bias".into(), vec![d], &w.lnf_bias);
        map
    }

    /// Write `config.json`, `model.safetensors`, `vocab.json` and `merges.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg_path, cfg).map_err(|e| Error::io(&cfg_path, e))?;
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        tensors::write_file(&dir.join(WEIGHTS_FILE), &self.to_tensor_map(), Some(meta))?;
        self.tokenizer.save(dir)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &TokenizerTables {
        &self.tokenizer
    }

    /// SHA-256 over the config and every weight in schema order.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    /// Encode text; fails with `PromptTooLong` past `max_positions`.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = self.tokenizer.encode(text);
        if ids.len() > self.config.max_positions {
            return Err(Error::PromptTooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        self.tokenizer.sequence(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        self.tokenizer.decode(ids)
    }

    /// Turn raw ids into a [`TokenSequence`], checking the vocabulary range.
    pub fn sequence(&self, ids: Vec<TokenId>) -> Result<TokenSequence> {
        self.tokenizer.sequence(ids)
    }

    pub fn end_of_text(&self) -> Option<TokenId> {
        self.tokenizer.end_of_text()
    }
}

impl TokenizerTables {
    /// Write `vocab.json` and `merges.txt` in the GPT-2 formats.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut vocab = serde_json::Map::new();
        for id in 0..self.vocab_size() as TokenId {
            vocab.insert(self.token_string(id)?, serde_json::Value::from(id));
        }
        let vocab_path = dir.join("vocab.json");
        std::fs::write(&vocab_path, serde_json::to_string(&vocab)?)
            .map_err(|e| Error::io(&vocab_path, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in self.merges() {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        let merges_path = dir.join("merges.txt");
        std::fs::write(&merges_path, merges).map_err(|e| Error::io(&merges_path, e))
    }
}

/// Load and validate a model directory.
///
/// Expects `config.json`, `model.safetensors`, `vocab.json` and `merges.txt`.
/// f16 weights are widened to f32.
pub fn load_model(model_dir: &Path) -> Result<ModelBundle> {
    for name in [CONFIG_FILE, WEIGHTS_FILE, "vocab.json", "merges.txt"] {
        let path = model_dir.join(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact(path));
        }
    }
    let config = ModelConfig::from_file(&model_dir.join(CONFIG_FILE))?;
    let tokenizer = TokenizerTables::from_dir(model_dir)?;
    let weights_path = model_dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let raw = tensors::decode_filtered(&bytes, |name| canonical_name(name).is_some())?;
    let tensors: TensorMap = raw
        .into_iter()
        .filter_map(|(name, t)| canonical_name(&name).map(|n| (n.to_string(), t)))
        .collect();
    ModelBundle::from_tensors(config, tokenizer, tensors)
}
