// SPDX-License-Identifier: MIT OR Apache-2.0

//! Request/response bodies and the blocking handlers behind each endpoint.

use serde::{Deserialize, Serialize};
use superscopes_core::model::{ModelBundle, TokenSequence};
use superscopes_core::patching::{PatchSpec, TargetLayer};
use superscopes_core::superscopes::{
    find_contextualization_layer, interpret, sweep, AlphaGrid, Amplifier, LayerInterpretation,
    Scoring,
};
use superscopes_core::trace::{forward_with_trace, ActivationTrace, ReprKind, ReprSelector};

use crate::error::ApiError;
use crate::{Loaded, SessionConfig};

#[derive(Debug, Serialize)]
pub struct Health {
    pub status: &'static str,
}

#[derive(Debug, Serialize)]
pub struct ConfigView {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f32,
}

#[derive(Debug, Serialize)]
pub struct TokenizerView {
    pub vocab_size: usize,
    pub merges: usize,
    pub end_of_text_id: Option<u32>,
}

#[derive(Debug, Serialize)]
pub struct Defaults {
    pub target_prompt: String,
    pub alphas: Vec<f32>,
    pub threshold: f32,
    pub max_new_tokens: usize,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub config: ConfigView,
    pub tokenizer: TokenizerView,
    pub model_hash: String,
    pub defaults: Defaults,
}

pub fn model_info(cfg: &SessionConfig, m: &Loaded) -> ModelInfo {
    let c = m.bundle.config();
    let t = m.bundle.tokenizer();
    ModelInfo {
        config: ConfigView {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            vocab_size: c.vocab_size,
            max_positions: c.max_positions,
            layernorm_epsilon: c.layernorm_epsilon,
        },
        tokenizer: TokenizerView {
            vocab_size: t.vocab_size(),
            merges: t.merges().len(),
            end_of_text_id: t.end_of_text(),
        },
        model_hash: m.bundle.fingerprint().to_string(),
        defaults: Defaults {
            target_prompt: cfg.target_prompt.clone(),
            alphas: cfg.grid.alphas(),
            threshold: cfg.threshold,
            max_new_tokens: cfg.max_new_tokens,
        },
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub prompt: String,
}

#[derive(Debug, Serialize)]
pub struct TokenView {
    pub id: u32,
    pub text: String,
    /// 1-based.
    pub position: usize,
}

#[derive(Debug, Serialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<TokenView>,
}

fn encode_prompt(bundle: &ModelBundle, prompt: &str) -> Result<TokenSequence, ApiError> {
    if prompt.is_empty() {
        return Err(ApiError::bad_request("empty_prompt", "prompt must not be empty").field("prompt"));
    }
    bundle
        .encode(prompt)
        .map_err(|e| ApiError::from_core(e, Some("prompt")))
}

pub fn tokenize(_: &SessionConfig, m: &Loaded, req: TokenizeRequest) -> Result<TokenizeResponse, ApiError> {
    let seq = encode_prompt(&m.bundle, &req.prompt)?;
    let tokens = seq
        .ids
        .iter()
        .zip(&seq.texts)
        .enumerate()
        .map(|(i, (&id, text))| TokenView {
            id,
            text: text.clone(),
            position: i + 1,
        })
        .collect();
    Ok(TokenizeResponse { tokens })
}

fn one() -> f32 {
    1.0
}

fn same() -> TargetLayer {
    TargetLayer::Same
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretRequest {
    pub prompt: String,
    pub position: usize,
    pub kind: ReprKind,
    pub layer: usize,
    #[serde(default = "one")]
    pub alpha: f32,
    #[serde(default = "same")]
    pub target_layer: TargetLayer,
    pub target_prompt: Option<String>,
    pub max_new_tokens: Option<usize>,
    pub reference: Option<String>,
    pub threshold: Option<f32>,
}

#[derive(Debug, Serialize)]
pub struct InterpretResponse {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub alpha: f32,
    /// Resolved target layer.
    pub target_layer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub prompt: String,
    pub position: usize,
    pub kind: ReprKind,
    pub layer: usize,
    pub alphas: Option<Vec<f32>>,
    #[serde(default = "same")]
    pub target_layer: TargetLayer,
    pub target_prompt: Option<String>,
    pub max_new_tokens: Option<usize>,
    pub reference: String,
    pub threshold: Option<f32>,
}

#[derive(Debug, Serialize)]
pub struct SweepEntry {
    pub alpha: f32,
    pub text: String,
    pub score: f32,
    pub success: bool,
}

#[derive(Debug, Serialize)]
pub struct SweepResponse {
    pub results: Vec<SweepEntry>,
    pub best_alpha: f32,
    pub target_layer: usize,
    pub threshold: f32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextualizeRequest {
    pub prompt: String,
    pub position: usize,
    pub reference: String,
    pub threshold: Option<f32>,
    #[serde(default = "same")]
    pub target_layer: TargetLayer,
    pub target_prompt: Option<String>,
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct ContextualizeResponse {
    pub layer_c: Option<usize>,
    pub per_layer: Vec<LayerInterpretation>,
    pub threshold: f32,
}

/// Source prompt, selector and target spec after validation against the model.
struct Prepared {
    trace: ActivationTrace,
    sel: ReprSelector,
    spec: PatchSpec,
}

#[allow(clippy::too_many_arguments)]
fn prepare(
    cfg: &SessionConfig,
    bundle: &ModelBundle,
    prompt: &str,
    kind: ReprKind,
    layer: usize,
    position: usize,
    target_layer: TargetLayer,
    target_prompt: Option<&str>,
    max_new_tokens: Option<usize>,
) -> Result<Prepared, ApiError> {
    let n_layers = bundle.config().n_layers;
    let target_prompt = target_prompt.unwrap_or(&cfg.target_prompt);
    let max_new = max_new_tokens.unwrap_or(cfg.max_new_tokens);
    if max_new == 0 {
        return Err(ApiError::bad_request("invalid_argument", "max_new_tokens must be >= 1").field("max_new_tokens"));
    }
    let spec = PatchSpec::new(target_prompt, target_layer, max_new)
        .map_err(|e| ApiError::from_core(e, Some("target_prompt")))?;
    let seq = encode_prompt(bundle, prompt)?;
    if layer > n_layers {
        return Err(ApiError::out_of_range(format!("layer {layer} > {n_layers}")).field("layer"));
    }
    if layer == 0 && kind != ReprKind::HiddenState {
        return Err(ApiError::out_of_range(format!("{kind} has no layer 0")).field("layer"));
    }
    if position == 0 || position > seq.len() {
        return Err(
            ApiError::out_of_range(format!("position {position} outside 1..={}", seq.len())).field("position"),
        );
    }
    if let TargetLayer::Layer(l) = target_layer {
        if l > n_layers {
            return Err(ApiError::out_of_range(format!("target layer {l} > {n_layers}")).field("target_layer"));
        }
    }
    let trace = forward_with_trace(bundle, &seq)?;
    Ok(Prepared {
        trace,
        sel: ReprSelector::new(kind, layer, position),
        spec,
    })
}

fn threshold_or_default(cfg: &SessionConfig, t: Option<f32>) -> Result<f32, ApiError> {
    match t {
        None => Ok(cfg.threshold),
        Some(t) if t.is_finite() && t > 0.0 && t < 1.0 => Ok(t),
        Some(t) => Err(ApiError::bad_request("invalid_argument", format!("threshold {t} outside (0, 1)")).field("threshold")),
    }
}

fn non_empty_reference(r: &str) -> Result<&str, ApiError> {
    if r.is_empty() {
        Err(ApiError::bad_request("invalid_argument", "reference must not be empty").field("reference"))
    } else {
        Ok(r)
    }
}

/// Errors raised while generating are attributed to the target side.
fn generation_error(e: superscopes_core::Error) -> ApiError {
    use superscopes_core::Error::*;
    let field = match &e {
        ContextOverflow { .. } => Some("max_new_tokens"),
        Overflow(_) => Some("alpha"),
        _ => None,
    };
    ApiError::from_core(e, field)
}

pub fn interpret_endpoint(cfg: &SessionConfig, m: &Loaded, req: InterpretRequest) -> Result<InterpretResponse, ApiError> {
    let amp = Amplifier::new(req.alpha).map_err(|e| ApiError::from_core(e, Some("alpha")))?;
    let threshold = threshold_or_default(cfg, req.threshold)?;
    let reference = req.reference.as_deref().map(non_empty_reference).transpose()?;
    let p = prepare(
        cfg,
        &m.bundle,
        &req.prompt,
        req.kind,
        req.layer,
        req.position,
        req.target_layer,
        req.target_prompt.as_deref(),
        req.max_new_tokens,
    )?;
    let scoring = reference.map(|r| Scoring {
        scorer: m.scorer.as_ref(),
        reference: r,
        threshold,
    });
    let r = interpret(&m.bundle, &p.trace, p.sel, amp, &p.spec, scoring.as_ref()).map_err(generation_error)?;
    Ok(InterpretResponse {
        text: r.text,
        token_ids: r.token_ids,
        alpha: r.alpha,
        target_layer: p.spec.target_layer.resolve(p.sel.layer),
        score: r.score,
        success: r.success,
    })
}

pub fn sweep_endpoint(cfg: &SessionConfig, m: &Loaded, req: SweepRequest) -> Result<SweepResponse, ApiError> {
    let grid = match &req.alphas {
        Some(a) => AlphaGrid::new(a).map_err(|e| ApiError::from_core(e, Some("alphas")))?,
        None => cfg.grid.clone(),
    };
    let threshold = threshold_or_default(cfg, req.threshold)?;
    let reference = non_empty_reference(&req.reference)?;
    let p = prepare(
        cfg,
        &m.bundle,
        &req.prompt,
        req.kind,
        req.layer,
        req.position,
        req.target_layer,
        req.target_prompt.as_deref(),
        req.max_new_tokens,
    )?;
    let scoring = Scoring {
        scorer: m.scorer.as_ref(),
        reference,
        threshold,
    };
    let rep = sweep(&m.bundle, &p.trace, p.sel, &grid, &p.spec, &scoring).map_err(generation_error)?;
    let target_layer = p.spec.target_layer.resolve(p.sel.layer);
    Ok(SweepResponse {
        results: rep
            .results
            .into_iter()
            .map(|r| SweepEntry {
                alpha: r.alpha,
                text: r.text,
                score: r.score.expect("sweep results are scored"),
                success: r.success.expect("sweep results are scored"),
            })
            .collect(),
        best_alpha: rep.best_alpha,
        target_layer,
        threshold,
    })
}

pub fn contextualize_endpoint(
    cfg: &SessionConfig,
    m: &Loaded,
    req: ContextualizeRequest,
) -> Result<ContextualizeResponse, ApiError> {
    let threshold = threshold_or_default(cfg, req.threshold)?;
    let reference = non_empty_reference(&req.reference)?;
    let p = prepare(
        cfg,
        &m.bundle,
        &req.prompt,
        ReprKind::HiddenState,
        0,
        req.position,
        req.target_layer,
        req.target_prompt.as_deref(),
        req.max_new_tokens,
    )?;
    let scoring = Scoring {
        scorer: m.scorer.as_ref(),
        reference,
        threshold,
    };
    let rep = find_contextualization_layer(&m.bundle, &p.trace, p.sel.position, &p.spec, &scoring)
        .map_err(generation_error)?;
    Ok(ContextualizeResponse {
        layer_c: rep.layer_c,
        per_layer: rep.per_layer,
        threshold,
    })
}
