// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream capture.
//!
//! One forward pass over a source prompt records, for every block `l` and
//! position `i`, the block output `hidden[l][i]`, the residual after the
//! attention branch `pre_mlp[l][i]` and the MLP branch output `mlp_out[l][i]`.
//! `hidden[0]` is the embedding-layer output. The two block-side quantities
//! are captured independently, so `hidden == pre_mlp + mlp_out` is a real
//! check rather than a definition.
//!
//! Layers and positions are 1-based in this module's public API (layer 0 is
//! only valid for [`ReprKind::HiddenState`]).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tensors::{self, Tensor, TensorMap};
use crate::model::{ForwardHooks, KvCache, LogitRows, Matrix, ModelBundle, TokenSequence};

/// Which residual-stream component a selector addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReprKind {
    /// Block output `h`.
    #[serde(rename = "hidden")]
    HiddenState,
    /// Residual after attention, before the MLP branch is added.
    #[serde(rename = "premlp")]
    PreMlpResidual,
    /// MLP branch output.
    #[serde(rename = "mlp")]
    MlpOutput,
}

impl ReprKind {
    pub const ALL: [ReprKind; 3] = [
        ReprKind::PreMlpResidual,
        ReprKind::MlpOutput,
        ReprKind::HiddenState,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReprKind::HiddenState => "hidden",
            ReprKind::PreMlpResidual => "premlp",
            ReprKind::MlpOutput => "mlp",
        }
    }
}

impl fmt::Display for ReprKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReprKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hidden" => Ok(ReprKind::HiddenState),
            "premlp" => Ok(ReprKind::PreMlpResidual),
            "mlp" => Ok(ReprKind::MlpOutput),
            other => Err(Error::InvalidArgument(format!(
                "unknown representation kind {other:?} (expected hidden|premlp|mlp)"
            ))),
        }
    }
}

/// Address of one vector in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReprSelector {
    pub kind: ReprKind,
    pub layer: usize,
    /// 1-based token position.
    pub position: usize,
}

impl ReprSelector {
    pub fn new(kind: ReprKind, layer: usize, position: usize) -> Self {
        ReprSelector {
            kind,
            layer,
            position,
        }
    }

    /// Check the selector against a model depth and prompt length.
    pub fn validate(&self, n_layers: usize, n_positions: usize) -> Result<()> {
        if self.kind != ReprKind::HiddenState && self.layer == 0 {
            return Err(Error::InvalidSelector(format!(
                "{} has no layer 0 (layers are 1..={n_layers})",
                self.kind
            )));
        }
        if self.layer > n_layers {
            return Err(Error::InvalidSelector(format!(
                "layer {} > {n_layers}",
                self.layer
            )));
        }
        if self.position == 0 || self.position > n_positions {
            return Err(Error::InvalidSelector(format!(
                "position {} outside 1..={n_positions}",
                self.position
            )));
        }
        Ok(())
    }
}

/// Captured residual-stream components of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    prompt: TokenSequence,
    n_layers: usize,
    d_model: usize,
    /// (L + 1, n, d)
    hidden: Vec<f32>,
    /// (L, n, d)
    pre_mlp: Vec<f32>,
    /// (L, n, d)
    mlp_out: Vec<f32>,
    logits: Matrix,
}

struct Recorder {
    n: usize,
    d: usize,
    hidden: Vec<f32>,
    pre_mlp: Vec<f32>,
    mlp_out: Vec<f32>,
}

impl ForwardHooks for Recorder {
    fn residual(&mut self, layer: usize, _start: usize, rows: &mut Matrix) {
        let base = layer * self.n * self.d;
        self.hidden[base..base + rows.data.len()].copy_from_slice(&rows.data);
    }

    fn block(&mut self, layer: usize, _start: usize, pre_mlp: &Matrix, mlp_out: &Matrix) {
        let base = (layer - 1) * self.n * self.d;
        self.pre_mlp[base..base + pre_mlp.data.len()].copy_from_slice(&pre_mlp.data);
        self.mlp_out[base..base + mlp_out.data.len()].copy_from_slice(&mlp_out.data);
    }
}

/// Run the source prompt once and record every residual-stream component.
pub fn forward_with_trace(bundle: &ModelBundle, prompt: &TokenSequence) -> Result<ActivationTrace> {
    let cfg = bundle.config();
    let n = prompt.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot trace an empty prompt".into()));
    }
    let (l, d) = (cfg.n_layers, cfg.d_model);
    let mut rec = Recorder {
        n,
        d,
        hidden: vec![0.0; (l + 1) * n * d],
        pre_mlp: vec![0.0; l * n * d],
        mlp_out: vec![0.0; l * n * d],
    };
    let mut cache = KvCache::new(cfg);
    let out = bundle.forward_hooked(&prompt.ids, &mut cache, &mut rec, LogitRows::All)?;
    Ok(ActivationTrace {
        prompt: prompt.clone(),
        n_layers: l,
        d_model: d,
        hidden: rec.hidden,
        pre_mlp: rec.pre_mlp,
        mlp_out: rec.mlp_out,
        logits: out.logits,
    })
}

impl ActivationTrace {
    pub fn prompt(&self) -> &TokenSequence {
        &self.prompt
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_positions(&self) -> usize {
        self.prompt.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Logits of the traced pass, `(n, vocab)`.
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Shape of the hidden-state tensor: `(L + 1, n, d)`.
    pub fn hidden_shape(&self) -> (usize, usize, usize) {
        (self.n_layers + 1, self.n_positions(), self.d_model)
    }

    fn slot(&self, layer_index: usize, position: usize) -> std::ops::Range<usize> {
        let base = (layer_index * self.n_positions() + (position - 1)) * self.d_model;
        base..base + self.d_model
    }

    /// Borrow a vector without copying. Same bounds rules as [`select_repr`].
    pub fn view(&self, sel: ReprSelector) -> Result<&[f32]> {
        sel.validate(self.n_layers, self.n_positions())?;
        Ok(match sel.kind {
            ReprKind::HiddenState => &self.hidden[self.slot(sel.layer, sel.position)],
            ReprKind::PreMlpResidual => &self.pre_mlp[self.slot(sel.layer - 1, sel.position)],
            ReprKind::MlpOutput => &self.mlp_out[self.slot(sel.layer - 1, sel.position)],
        })
    }

    /// Largest residual-identity violation over all `(l, i)`, relative to
    /// `1 + max|h|`.
    pub fn residual_identity_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for layer in 1..=self.n_layers {
            for pos in 1..=self.n_positions() {
                let h = &self.hidden[self.slot(layer, pos)];
                let pre = &self.pre_mlp[self.slot(layer - 1, pos)];
                let mlp = &self.mlp_out[self.slot(layer - 1, pos)];
                let scale = 1.0 + h.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let err = h
                    .iter()
                    .zip(pre)
                    .zip(mlp)
                    .fold(0.0f32, |m, ((h, p), q)| m.max((h - (p + q)).abs()));
                worst = worst.max(err / scale);
            }
        }
        worst
    }

    /// Per-layer, per-position L2 norms of every component.
    pub fn summary(&self) -> TraceSummary {
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let n = self.n_positions();
        let rows = |data: &[f32], layers: usize| -> Vec<Vec<f32>> {
            (0..layers)
                .map(|l| (1..=n).map(|p| norm(&data[self.slot(l, p)])).collect())
                .collect()
        };
        TraceSummary {
            prompt: self.prompt.text(),
            tokens: self.prompt.texts.clone(),
            token_ids: self.prompt.ids.clone(),
            n_layers: self.n_layers,
            d_model: self.d_model,
            hidden_norms: rows(&self.hidden, self.n_layers + 1),
            pre_mlp_norms: rows(&self.pre_mlp, self.n_layers),
            mlp_out_norms: rows(&self.mlp_out, self.n_layers),
        }
    }

    /// Dump `hidden`, `pre_mlp` and `mlp_out` to a tensor container.
    pub fn save_tensors(&self, path: &Path) -> Result<()> {
        let (l, n, d) = (self.n_layers, self.n_positions(), self.d_model);
        let mut map = TensorMap::new();
        map.insert("hidden".into(), Tensor::new(vec![l + 1, n, d], self.hidden.clone())?);
        map.insert("pre_mlp".into(), Tensor::new(vec![l, n, d], self.pre_mlp.clone())?);
        map.insert("mlp_out".into(), Tensor::new(vec![l, n, d], self.mlp_out.clone())?);
        let mut meta = BTreeMap::new();
        meta.insert("prompt".to_string(), self.prompt.text());
        meta.insert(
            "token_ids".to_string(),
            serde_json::to_string(&self.prompt.ids)?,
        );
        tensors::write_file(path, &map, Some(meta))
    }
}

/// JSON export of a trace: vector norms only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub prompt: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub n_layers: usize,
    pub d_model: usize,
    /// `[layer 0..=L][position]`
    pub hidden_norms: Vec<Vec<f32>>,
    /// `[layer 1..=L][position]`
    pub pre_mlp_norms: Vec<Vec<f32>>,
    pub mlp_out_norms: Vec<Vec<f32>>,
}

/// Copy one vector out of a trace.
pub fn select_repr(trace: &ActivationTrace, sel: ReprSelector) -> Result<Vec<f32>> {
    trace.view(sel).map(<[f32]>::to_vec)
}

/// 1-based position of the last token of the first occurrence of `subject`.
pub fn last_subject_position(prompt: &TokenSequence, subject: &str) -> Result<usize> {
    let hay = prompt.bytes();
    let needle = subject.as_bytes();
    if needle.is_empty() || needle.len() > hay.len() {
        return Err(Error::SubjectNotFound(subject.to_string()));
    }
    let start = hay
        .windows(needle.len())
        .position(|w| w == needle)
        .ok_or_else(|| Error::SubjectNotFound(subject.to_string()))?;
    let last_byte = start + needle.len() - 1;
    let idx = prompt
        .token_at_byte(last_byte)
        .ok_or_else(|| Error::SubjectNotFound(subject.to_string()))?;
    Ok(idx + 1)
}
