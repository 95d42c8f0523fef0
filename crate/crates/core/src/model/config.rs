// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_epsilon() -> f32 {
    1e-5
}

/// Architecture hyper-parameters of a GPT-2-class decoder.
///
/// Deserializes from the usual `config.json` keys (`n_layer`, `n_head`,
/// `n_embd`, `n_positions`, `vocab_size`, optional `layer_norm_epsilon`);
/// unknown keys are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "n_layer")]
    pub n_layers: usize,
    #[serde(rename = "n_embd")]
    pub d_model: usize,
    #[serde(rename = "n_head")]
    pub n_heads: usize,
    pub vocab_size: usize,
    #[serde(rename = "n_positions")]
    pub max_positions: usize,
    #[serde(rename = "layer_norm_epsilon", default = "default_epsilon")]
    pub layernorm_epsilon: f32,
}

impl ModelConfig {
    /// The published GPT-2-small hyper-parameters.
    pub const GPT2_SMALL: ModelConfig = ModelConfig {
        n_layers: 12,
        d_model: 768,
        n_heads: 12,
        vocab_size: 50257,
        max_positions: 1024,
        layernorm_epsilon: 1e-5,
    };

    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            max_positions,
            layernorm_epsilon: default_epsilon(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layer", self.n_layers),
            ("n_embd", self.d_model),
            ("n_head", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("n_positions", self.max_positions),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::SchemaViolation(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::SchemaViolation(format!(
                "n_embd {} is not divisible by n_head {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return Err(Error::SchemaViolation(
                "layer_norm_epsilon must be a positive finite number".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the MLP hidden layer (four times the model width in GPT-2).
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Every tensor of the architecture with its expected shape.
    ///
    /// Linear weights use the `(in, out)` layout of the GPT-2 checkpoints.
    pub fn tensor_schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut schema = vec![
            ("wte.weight".to_string(), vec![self.vocab_size, d]),
            ("wpe.weight".to_string(), vec![self.max_positions, d]),
        ];
        for layer in 0..self.n_layers {
            let p = format!("h.{layer}.");
            schema.extend([
                (format!("{p}ln_1.weight"), vec![d]),
                (format!("{p}ln_1.bias"), vec![d]),
                (format!("{p}attn.c_attn.weight"), vec![d, 3 * d]),
                (format!("{p}attn.c_attn.bias"), vec![3 * d]),
                (format!("{p}attn.c_proj.weight"), vec![d, d]),
                (format!("{p}attn.c_proj.bias"), vec![d]),
                (format!("{p}ln_2.weight"), vec![d]),
                (format!("{p}ln_2.bias"), vec![d]),
                (format!("{p}mlp.c_fc.weight"), vec![d, self.d_ff()]),
                (format!("{p}mlp.c_fc.bias"), vec![self.d_ff()]),
                (format!("{p}mlp.c_proj.weight"), vec![self.d_ff(), d]),
                (format!("{p}mlp.c_proj.bias"), vec![d]),
            ]);
        }
        schema.push(("ln_f.weight".to_string(), vec![d]));
        schema.push(("ln_f.bias".to_string(), vec![d]));
        schema
    }

    /// Total number of weights (the unembedding is tied to `wte`).
    pub fn parameter_count(&self) -> usize {
        self.tensor_schema()
            .iter()
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(
            ModelConfig::new(2, 10, 3, 50, 16),
            Err(Error::SchemaViolation(_))
        ));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(ModelConfig::new(0, 8, 1, 50, 16).is_err());
        assert!(ModelConfig::new(2, 8, 1, 0, 16).is_err());
    }

    #[test]
    fn parses_hf_config_keys() {
        let raw = r#"{"n_layer": 2, "n_head": 1, "n_embd": 8, "n_positions": 16,
                      "vocab_size": 300, "activation_function": "gelu_new"}"#;
        let cfg: ModelConfig = serde_json::from_str(raw).unwrap();
        assert_eq!(cfg.n_layers, 2);
        assert_eq!(cfg.d_model, 8);
        assert_eq!(cfg.layernorm_epsilon, 1e-5);
    }

    #[test]
    fn toy_schema_has_two_blocks() {
        let cfg = ModelConfig::new(2, 8, 1, 300, 16).unwrap();
        let schema = cfg.tensor_schema();
        assert_eq!(schema.len(), 2 + 2 * 12 + 2);
        assert!(schema.iter().any(|(n, _)| n == "h.1.mlp.c_proj.weight"));
    }
}
