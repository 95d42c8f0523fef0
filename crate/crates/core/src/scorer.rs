// SPDX-License-Identifier: MIT OR Apache-2.0

//! Text-pair similarity used to decide whether an interpretation matches a
//! reference description.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{KvCache, LogitRows, ModelBundle, NoHooks};

pub const DEFAULT_THRESHOLD: f32 = 0.3;

/// Similarity in `[-1, 1]`. Implementations must be reflexive (`score(a, a)
/// == 1`) and symmetric.
pub trait Scorer: Send + Sync {
    fn score(&self, a: &str, b: &str) -> Result<f32>;

    fn name(&self) -> &str;
}

pub type ScorerHandle = Arc<dyn Scorer>;

impl fmt::Debug for dyn Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scorer({})", self.name())
    }
}

/// Cosine similarity accumulated in f64 and clamped to `[-1, 1]`.
/// Zero vectors score 0 against everything except another zero vector.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

fn cosine_of_embeddings(a: &[f32], b: &[f32], same_text: bool) -> f32 {
    // Rounding can leave cos(a, a) a hair under 1; identical inputs are pinned.
    if same_text {
        1.0
    } else {
        cosine(a, b)
    }
}

/// Mean-pooled, final-layernormed last-block states of the host model.
pub struct HostModelScorer {
    bundle: Arc<ModelBundle>,
}

impl HostModelScorer {
    pub fn new(bundle: Arc<ModelBundle>) -> Self {
        HostModelScorer { bundle }
    }

    /// Texts longer than the context window are truncated to it.
    pub fn embed(&self, text: &str) -> Result<Vec<f32>> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut ids = self.bundle.tokenizer().encode(text);
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        ids.truncate(self.bundle.config().max_positions);
        let mut cache = KvCache::new(self.bundle.config());
        let out = self
            .bundle
            .forward_hooked(&ids, &mut cache, &mut NoHooks, LogitRows::None)?;
        let normed = self.bundle.final_norm(&out.final_hidden);
        let d = normed.cols;
        let mut pooled = vec![0f32; d];
        for r in 0..normed.rows {
            for (p, v) in pooled.iter_mut().zip(normed.row(r)) {
                *p += v;
            }
        }
        let n = normed.rows as f32;
        pooled.iter_mut().for_each(|p| *p /= n);
        Ok(pooled)
    }
}

impl Scorer for HostModelScorer {
    fn score(&self, a: &str, b: &str) -> Result<f32> {
        let ea = self.embed(a)?;
        if a == b {
            return Ok(1.0);
        }
        let eb = self.embed(b)?;
        Ok(cosine(&ea, &eb))
    }

    fn name(&self) -> &str {
        "host-model"
    }
}

/// Hex SHA-256 of a text; the key under which its embedding is stored.
pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Precomputed sentence embeddings (e.g. from an external encoder): a JSON
/// manifest `{text: key}` plus a tensor container holding one 1-D tensor per key.
pub struct EmbeddingFileScorer {
    manifest: HashMap<String, String>,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingFileScorer {
    pub fn from_files(manifest: &Path, tensors: &Path) -> Result<Self> {
        let raw = std::fs::read(manifest).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(manifest.to_path_buf())
            } else {
                Error::io(manifest, e)
            }
        })?;
        let manifest: HashMap<String, String> = serde_json::from_slice(&raw)?;
        let map = crate::model::tensors::read_file(tensors)?;
        let vectors = map.into_iter().map(|(k, t)| (k, t.data)).collect();
        Self::new(manifest, vectors)
    }

    pub fn new(manifest: HashMap<String, String>, vectors: HashMap<String, Vec<f32>>) -> Result<Self> {
        let mut width = None;
        for v in vectors.values() {
            if *width.get_or_insert(v.len()) != v.len() {
                return Err(Error::SchemaViolation("embedding widths differ".into()));
            }
        }
        Ok(EmbeddingFileScorer { manifest, vectors })
    }

    fn lookup(&self, text: &str) -> Result<&[f32]> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let key = self
            .manifest
            .get(text)
            .cloned()
            .unwrap_or_else(|| text_key(text));
        self.vectors
            .get(&key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(text.to_string()))
    }
}

impl Scorer for EmbeddingFileScorer {
    fn score(&self, a: &str, b: &str) -> Result<f32> {
        let ea = self.lookup(a)?;
        let eb = self.lookup(b)?;
        Ok(cosine_of_embeddings(ea, eb, a == b))
    }

    fn name(&self) -> &str {
        "embedding-file"
    }
}

/// Returns a fixed score for distinct texts (and 1 for identical ones).
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f32);

impl Scorer for ConstantScorer {
    fn score(&self, a: &str, b: &str) -> Result<f32> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(if a == b { 1.0 } else { self.0 })
    }

    fn name(&self) -> &str {
        "constant"
    }
}

/// Wraps a closure over the unordered text pair. The closure sees the pair
/// sorted, which makes the scorer symmetric by construction.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&str, &str) -> f32 + Send + Sync,
{
    fn score(&self, a: &str, b: &str) -> Result<f32> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::EmptyText);
        }
        if a == b {
            return Ok(1.0);
        }
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        Ok((self.0)(x, y).clamp(-1.0, 1.0))
    }

    fn name(&self) -> &str {
        "fn"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy, ModelConfig};
    use proptest::prelude::*;

    fn host() -> HostModelScorer {
        let b = toy::random_bundle(ModelConfig::new(2, 16, 2, 257, 64).unwrap(), 3);
        HostModelScorer::new(Arc::new(b))
    }

    #[test]
    fn cosine_analytic_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(cosine(&[1.0, -2.0, 3.0], &[-1.0, 2.0, -3.0]), -1.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn host_scorer_is_reflexive_and_rejects_empty() {
        let s = host();
        assert_eq!(s.score("British Princess", "British Princess").unwrap(), 1.0);
        let e = s.embed("British Princess").unwrap();
        assert!((cosine(&e, &e) - 1.0).abs() < 1e-6);
        assert!(matches!(s.score("", "x"), Err(Error::EmptyText)));
        let v = s.score("rock band", "chemical compound").unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn long_texts_are_truncated() {
        let s = host();
        let long = "a".repeat(500);
        assert!(s.embed(&long).is_ok());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = crate::model::TensorMap::new();
        let mut manifest = HashMap::new();
        for (text, v) in [("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0]), ("c", vec![1.0, 1.0])] {
            manifest.insert(text.to_string(), text_key(text));
            map.insert(text_key(text), crate::model::Tensor::new(vec![2], v).unwrap());
        }
        crate::model::tensors::write_file(&dir.path().join("emb.safetensors"), &map, None).unwrap();
        std::fs::write(dir.path().join("manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
        let s = EmbeddingFileScorer::from_files(
            &dir.path().join("manifest.json"),
            &dir.path().join("emb.safetensors"),
        )
        .unwrap();
        assert_eq!(s.score("a", "b").unwrap(), 0.0);
        assert!((s.score("a", "c").unwrap() - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(s.score("a", "zzz"), Err(Error::MissingEmbedding(_))));
        assert!(matches!(
            EmbeddingFileScorer::from_files(&dir.path().join("nope.json"), &dir.path().join("emb.safetensors")),
            Err(Error::MissingArtifact(_))
        ));
    }

    fn words() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-z]{1,8}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn host_scorer_contract(a in words(), b in words()) {
            let s = host();
            prop_assert!((s.score(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
            let ab = s.score(&a, &b).unwrap();
            let ba = s.score(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn fn_scorer_contract(a in words(), b in words()) {
            let s = FnScorer(|x: &str, y: &str| (x.len() as f32 - 2.0 * y.len() as f32) / 40.0);
            prop_assert_eq!(s.score(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(s.score(&a, &b).unwrap(), s.score(&b, &a).unwrap());
        }
    }
}
