// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching: generate from a target prompt while the residual
//! stream at `(target layer, placeholder position)` is overwritten with a
//! supplied vector.
//!
//! Under KV caching the placeholder position is computed once, in the prompt
//! pass, so each replacement fires exactly once and every later token sees
//! the patched state through the cache.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{
    generate, ForwardHooks, GenerateOptions, Matrix, ModelBundle, ModelConfig, TokenId,
    TokenSequence,
};

/// Marker substituted by the literal token `X` in target prompts.
pub const PLACEHOLDER: &str = "{}";

/// Few-shot entity-description prompt; the model continues with a short
/// description of whatever is patched into `X`.
pub const DEFAULT_TARGET_PROMPT: &str = "Syria: Country in the Middle East, Leonardo DiCaprio: American actor, Samsung: South Korean multinational corporation, {}";

pub const DEFAULT_MAX_NEW_TOKENS: usize = 20;

/// Layer of the target pass that receives the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetLayer {
    /// The layer the source vector was read from.
    Same,
    /// A fixed layer; 0 is the embedding-layer output.
    Layer(usize),
}

impl TargetLayer {
    pub fn resolve(self, source_layer: usize) -> usize {
        match self {
            TargetLayer::Same => source_layer,
            TargetLayer::Layer(l) => l,
        }
    }
}

impl fmt::Display for TargetLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetLayer::Same => f.write_str("same"),
            TargetLayer::Layer(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for TargetLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "same" {
            return Ok(TargetLayer::Same);
        }
        s.parse::<usize>().map(TargetLayer::Layer).map_err(|_| {
            Error::InvalidArgument(format!("target layer {s:?} is neither \"same\" nor an integer"))
        })
    }
}

impl Serialize for TargetLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetLayer::Same => s.serialize_str("same"),
            TargetLayer::Layer(l) => s.serialize_u64(*l as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TargetLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(l) => Ok(TargetLayer::Layer(l)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Target-side description of a patched run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub target_prompt: String,
    pub target_layer: TargetLayer,
    pub max_new_tokens: usize,
}

impl PatchSpec {
    pub fn new(
        target_prompt: impl Into<String>,
        target_layer: TargetLayer,
        max_new_tokens: usize,
    ) -> Result<Self> {
        let target_prompt = target_prompt.into();
        let markers = target_prompt.matches(PLACEHOLDER).count();
        if markers != 1 {
            return Err(Error::BadTargetPrompt(format!(
                "expected exactly one {PLACEHOLDER} marker, found {markers}"
            )));
        }
        if max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
        }
        Ok(PatchSpec {
            target_prompt,
            target_layer,
            max_new_tokens,
        })
    }

    /// Same spec with `Same` replaced by the source layer.
    pub fn resolved(&self, source_layer: usize) -> PatchSpec {
        PatchSpec {
            target_layer: TargetLayer::Layer(self.target_layer.resolve(source_layer)),
            ..self.clone()
        }
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            target_prompt: DEFAULT_TARGET_PROMPT.to_string(),
            target_layer: TargetLayer::Same,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    /// 1-based.
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Residual-stream replacements applied during a forward pass, with a fire
/// counter per replacement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSet {
    items: Vec<Intervention>,
    fired: Vec<usize>,
}

impl InterventionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: usize, position: usize, vector: Vec<f32>) -> Result<()> {
        if position == 0 {
            return Err(Error::InvalidArgument("positions are 1-based".into()));
        }
        if self
            .items
            .iter()
            .any(|it| it.layer == layer && it.position == position)
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate replacement at layer {layer}, position {position}"
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("replacement vector is not finite".into()));
        }
        self.items.push(Intervention {
            layer,
            position,
            vector,
        });
        self.fired.push(0);
        Ok(())
    }

    /// Check layers and vector widths against a model.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for it in &self.items {
            if it.vector.len() != config.d_model {
                return Err(Error::DimensionError {
                    expected: config.d_model,
                    actual: it.vector.len(),
                });
            }
            if it.layer > config.n_layers {
                return Err(Error::InvalidSelector(format!(
                    "target layer {} > {}",
                    it.layer, config.n_layers
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Intervention] {
        &self.items
    }

    /// How many times each replacement was applied, in insertion order.
    pub fn fire_counts(&self) -> &[usize] {
        &self.fired
    }
}

impl ForwardHooks for InterventionSet {
    fn residual(&mut self, layer: usize, start: usize, rows: &mut Matrix) {
        for (it, fired) in self.items.iter().zip(self.fired.iter_mut()) {
            let idx = it.position - 1;
            if it.layer == layer && idx >= start && idx < start + rows.rows {
                rows.row_mut(idx - start).copy_from_slice(&it.vector);
                *fired += 1;
            }
        }
    }
}

/// Outcome of one (possibly patched) generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationResult {
    /// Decoded continuation, prompt excluded; a trailing end-of-text token is
    /// kept in `token_ids` but not rendered here.
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub alpha: f32,
    pub score: Option<f32>,
    pub success: Option<bool>,
}

impl InterpretationResult {
    /// Attach a similarity score; success is `score >= threshold`.
    pub fn scored(mut self, score: f32, threshold: f32) -> Self {
        self.score = Some(score);
        self.success = Some(score >= threshold);
        self
    }
}

/// Encode a target prompt with its placeholder replaced by `X`; returns the
/// sequence and the 1-based position of the token carrying `X`.
pub fn resolve_placeholder(bundle: &ModelBundle, target_prompt: &str) -> Result<(TokenSequence, usize)> {
    let markers = target_prompt.matches(PLACEHOLDER).count();
    if markers != 1 {
        return Err(Error::BadTargetPrompt(format!(
            "expected exactly one {PLACEHOLDER} marker, found {markers}"
        )));
    }
    let at = target_prompt.find(PLACEHOLDER).expect("one marker");
    let text = format!(
        "{}X{}",
        &target_prompt[..at],
        &target_prompt[at + PLACEHOLDER.len()..]
    );
    let seq = bundle.encode(&text)?;
    let idx = seq
        .token_at_byte(at)
        .ok_or_else(|| Error::BadTargetPrompt("placeholder token not found after encoding".into()))?;
    Ok((seq, idx + 1))
}

fn continuation(bundle: &ModelBundle, prompt_len: usize, full: &TokenSequence) -> Result<(String, Vec<TokenId>)> {
    let new_ids = full.ids[prompt_len..].to_vec();
    let eot = bundle.end_of_text();
    let visible: Vec<TokenId> = new_ids
        .iter()
        .copied()
        .filter(|id| Some(*id) != eot)
        .collect();
    Ok((bundle.decode(&visible)?, new_ids))
}

/// Patched generation with explicit decoding options. Also returns the
/// intervention set so callers can inspect fire counts.
pub fn patch_generate_with(
    bundle: &ModelBundle,
    spec: &PatchSpec,
    vector: Option<&[f32]>,
    opts: &GenerateOptions,
) -> Result<(InterpretationResult, InterventionSet)> {
    let cfg = bundle.config();
    let (prompt, position) = resolve_placeholder(bundle, &spec.target_prompt)?;
    let mut set = InterventionSet::new();
    if let Some(vector) = vector {
        let layer = match spec.target_layer {
            TargetLayer::Layer(l) => l,
            TargetLayer::Same => {
                return Err(Error::InvalidArgument(
                    "target layer \"same\" must be resolved against a source layer first".into(),
                ))
            }
        };
        if vector.len() != cfg.d_model {
            return Err(Error::DimensionError {
                expected: cfg.d_model,
                actual: vector.len(),
            });
        }
        set.push(layer, position, vector.to_vec())?;
        set.validate(cfg)?;
    }
    let opts = GenerateOptions {
        max_new_tokens: spec.max_new_tokens,
        ..*opts
    };
    let full = generate(bundle, &prompt, &opts, &mut set)?;
    let (text, token_ids) = continuation(bundle, prompt.len(), &full)?;
    Ok((
        InterpretationResult {
            text,
            token_ids,
            alpha: 1.0,
            score: None,
            success: None,
        },
        set,
    ))
}

/// Greedy, KV-cached generation of the target prompt with `vector` written
/// into the residual stream at `(spec.target_layer, placeholder position)`.
pub fn patch_generate(bundle: &ModelBundle, spec: &PatchSpec, vector: &[f32]) -> Result<InterpretationResult> {
    patch_generate_with(bundle, spec, Some(vector), &GenerateOptions::default()).map(|(r, _)| r)
}

/// Unpatched control run of the target prompt.
pub fn baseline_generate(bundle: &ModelBundle, spec: &PatchSpec) -> Result<InterpretationResult> {
    patch_generate_with(bundle, spec, None, &GenerateOptions::default()).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy, Decoding};
    use crate::trace::{forward_with_trace, select_repr, ReprKind, ReprSelector};

    fn bundle() -> ModelBundle {
        toy::random_bundle(ModelConfig::new(3, 16, 2, 257, 64).unwrap(), 31)
    }

    #[test]
    fn placeholder_resolution() {
        let b = bundle();
        let (seq, pos) = resolve_placeholder(&b, "The meaning of {} is:").unwrap();
        assert_eq!(seq.texts[pos - 1], "X");
        assert_eq!(seq.text(), "The meaning of X is:");
        let (_, pos) = resolve_placeholder(&b, "{}").unwrap();
        assert_eq!(pos, 1);
        for bad in ["no marker here", "{} and {}"] {
            assert!(matches!(resolve_placeholder(&b, bad), Err(Error::BadTargetPrompt(_))));
            assert!(PatchSpec::new(bad, TargetLayer::Layer(0), 5).is_err());
        }
    }

    #[test]
    fn identity_patch_is_a_noop() {
        let b = bundle();
        let spec_text = "A: b, {} is";
        let (prompt, pos) = resolve_placeholder(&b, spec_text).unwrap();
        let t = forward_with_trace(&b, &prompt).unwrap();
        for layer in 0..=3 {
            let spec = PatchSpec::new(spec_text, TargetLayer::Layer(layer), 8).unwrap();
            let own = select_repr(&t, ReprSelector::new(ReprKind::HiddenState, layer, pos)).unwrap();
            assert_eq!(patch_generate(&b, &spec, &own).unwrap(), baseline_generate(&b, &spec).unwrap());
        }
    }

    #[test]
    fn patch_fires_once_under_cache_and_every_step_without() {
        let b = bundle();
        let spec = PatchSpec::new("x {} y", TargetLayer::Layer(1), 6).unwrap();
        let v = vec![3.0; 16];
        let (res, set) = patch_generate_with(&b, &spec, Some(&v), &GenerateOptions::default()).unwrap();
        assert_eq!(set.fire_counts(), &[1]);
        let opts = GenerateOptions {
            use_cache: false,
            ..GenerateOptions::default()
        };
        let (full, set) = patch_generate_with(&b, &spec, Some(&v), &opts).unwrap();
        assert_eq!(set.fire_counts(), &[full.token_ids.len()]);
        assert_eq!(res, full);
    }

    #[test]
    fn dimension_and_layer_errors() {
        let b = bundle();
        let spec = PatchSpec::new("{}", TargetLayer::Layer(1), 3).unwrap();
        assert!(matches!(
            patch_generate(&b, &spec, &[1.0; 5]),
            Err(Error::DimensionError { expected: 16, actual: 5 })
        ));
        let spec = PatchSpec::new("{}", TargetLayer::Layer(4), 3).unwrap();
        assert!(matches!(patch_generate(&b, &spec, &[1.0; 16]), Err(Error::InvalidSelector(_))));
        let spec = PatchSpec::new("{}", TargetLayer::Same, 3).unwrap();
        assert!(patch_generate(&b, &spec, &[1.0; 16]).is_err());
        let spec = PatchSpec::new("{}", TargetLayer::Layer(1), 3).unwrap();
        assert!(patch_generate(&b, &spec, &[f32::NAN; 16]).is_err());
    }

    #[test]
    fn intervention_set_rejects_duplicates() {
        let mut set = InterventionSet::new();
        set.push(1, 2, vec![0.0; 4]).unwrap();
        assert!(set.push(1, 2, vec![1.0; 4]).is_err());
        set.push(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn target_layer_parsing() {
        assert_eq!("same".parse::<TargetLayer>().unwrap(), TargetLayer::Same);
        assert_eq!("0".parse::<TargetLayer>().unwrap(), TargetLayer::Layer(0));
        assert!("top".parse::<TargetLayer>().is_err());
        let v: TargetLayer = serde_json::from_str("\"same\"").unwrap();
        assert_eq!(v, TargetLayer::Same);
        let v: TargetLayer = serde_json::from_str("3").unwrap();
        assert_eq!(v, TargetLayer::Layer(3));
        assert_eq!(serde_json::to_string(&TargetLayer::Layer(2)).unwrap(), "2");
    }

    #[test]
    fn greedy_options_are_respected() {
        let b = bundle();
        let spec = PatchSpec::new("q {}", TargetLayer::Layer(0), 4).unwrap();
        let opts = GenerateOptions {
            decoding: Decoding::Sample { temperature: 0.7, seed: 1 },
            ..GenerateOptions::default()
        };
        let (a, _) = patch_generate_with(&b, &spec, None, &opts).unwrap();
        let (c, _) = patch_generate_with(&b, &spec, None, &opts).unwrap();
        assert_eq!(a, c);
    }
}
