// SPDX-License-Identifier: MIT OR Apache-2.0

//! Amplified interpretation of residual-stream components: scale a captured
//! vector by α, patch it into the target prompt, read the continuation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::patching::{patch_generate, InterpretationResult, PatchSpec, TargetLayer};
use crate::scorer::{HostModelScorer, Scorer, ScorerHandle, DEFAULT_THRESHOLD};
use crate::trace::{select_repr, ActivationTrace, ReprKind, ReprSelector};

pub const DEFAULT_ALPHAS: [f32; 6] = [1.0, 3.0, 6.0, 9.0, 12.0, 15.0];

/// Positive, finite scale factor.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Amplifier(f32);

impl Amplifier {
    pub const IDENTITY: Amplifier = Amplifier(1.0);

    pub fn new(alpha: f32) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 {
            Ok(Amplifier(alpha))
        } else {
            Err(Error::InvalidArgument(format!("amplifier must be finite and > 0, got {alpha}")))
        }
    }

    pub fn alpha(self) -> f32 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Amplifier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Amplifier::new(f32::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Strictly ascending amplifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct AlphaGrid(Vec<Amplifier>);

impl AlphaGrid {
    pub fn new(alphas: &[f32]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("alpha grid is empty".into()));
        }
        let amps = alphas.iter().map(|&a| Amplifier::new(a)).collect::<Result<Vec<_>>>()?;
        if amps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument("alpha grid must be strictly ascending".into()));
        }
        Ok(AlphaGrid(amps))
    }

    pub fn single(amp: Amplifier) -> Self {
        AlphaGrid(vec![amp])
    }

    pub fn amplifiers(&self) -> &[Amplifier] {
        &self.0
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.0.iter().map(|a| a.0).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains_identity(&self) -> bool {
        self.0.contains(&Amplifier::IDENTITY)
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::new(&DEFAULT_ALPHAS).expect("default grid is valid")
    }
}

impl TryFrom<Vec<f32>> for AlphaGrid {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        AlphaGrid::new(&v)
    }
}

impl From<AlphaGrid> for Vec<f32> {
    fn from(g: AlphaGrid) -> Self {
        g.alphas()
    }
}

/// `α · v`.
pub fn amplify(vector: &[f32], amp: Amplifier) -> Result<Vec<f32>> {
    let out: Vec<f32> = vector.iter().map(|v| amp.0 * v).collect();
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Overflow(*bad));
    }
    Ok(out)
}

/// What to compare interpretations against, and the success cut-off.
#[derive(Clone, Copy)]
pub struct Scoring<'a> {
    pub scorer: &'a dyn Scorer,
    pub reference: &'a str,
    /// Success is `score >= threshold`.
    pub threshold: f32,
}

impl<'a> Scoring<'a> {
    pub fn new(scorer: &'a dyn Scorer, reference: &'a str, threshold: f32) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::InvalidArgument("reference must not be empty".into()));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        Ok(Scoring { scorer, reference, threshold })
    }

    pub fn with_default_threshold(scorer: &'a dyn Scorer, reference: &'a str) -> Result<Self> {
        Self::new(scorer, reference, DEFAULT_THRESHOLD)
    }

    /// An empty continuation (immediate end-of-text) scores 0.
    pub fn apply(&self, result: InterpretationResult) -> Result<InterpretationResult> {
        let score = if result.text.is_empty() {
            0.0
        } else {
            self.scorer.score(&result.text, self.reference)?
        };
        Ok(result.scored(score, self.threshold))
    }
}

/// Patch `α · select_repr(trace, sel)` into the target prompt and decode.
/// `TargetLayer::Same` resolves to the selector's layer.
pub fn interpret(
    bundle: &ModelBundle,
    trace: &ActivationTrace,
    sel: ReprSelector,
    amp: Amplifier,
    spec: &PatchSpec,
    scoring: Option<&Scoring<'_>>,
) -> Result<InterpretationResult> {
    let source = select_repr(trace, sel)?;
    let vector = amplify(&source, amp)?;
    let spec = spec.resolved(sel.layer);
    let mut result = patch_generate(bundle, &spec, &vector)?;
    result.alpha = amp.alpha();
    match scoring {
        Some(s) => s.apply(result),
        None => Ok(result),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub selector: ReprSelector,
    /// Target spec with the target layer resolved.
    pub spec: PatchSpec,
    pub reference: String,
    pub threshold: f32,
    /// One result per grid α, ascending.
    pub results: Vec<InterpretationResult>,
    pub best_alpha: f32,
}

impl SweepReport {
    pub fn best(&self) -> &InterpretationResult {
        self.results
            .iter()
            .find(|r| r.alpha == self.best_alpha)
            .expect("best alpha comes from results")
    }

    pub fn any_success(&self) -> bool {
        self.results.iter().any(|r| r.success == Some(true))
    }
}

/// α with the highest score; ties (and unscored results) go to the smallest α.
/// `results` must be in ascending α order.
pub fn best_alpha(results: &[InterpretationResult]) -> Option<f32> {
    let mut best: Option<(f32, f32)> = None;
    for r in results {
        let s = r.score.unwrap_or(f32::NEG_INFINITY);
        match best {
            Some((_, bs)) if s <= bs => {}
            _ => best = Some((r.alpha, s)),
        }
    }
    best.map(|(a, _)| a)
}

/// Interpret `sel` at every α of the grid. Runs concurrently; results are
/// returned in grid order.
pub fn sweep(
    bundle: &ModelBundle,
    trace: &ActivationTrace,
    sel: ReprSelector,
    grid: &AlphaGrid,
    spec: &PatchSpec,
    scoring: &Scoring<'_>,
) -> Result<SweepReport> {
    sel.validate(trace.n_layers(), trace.n_positions())?;
    let results = grid
        .amplifiers()
        .par_iter()
        .map(|&amp| interpret(bundle, trace, sel, amp, spec, Some(scoring)))
        .collect::<Result<Vec<_>>>()?;
    let best_alpha = best_alpha(&results).expect("grid is non-empty");
    Ok(SweepReport {
        selector: sel,
        spec: spec.resolved(sel.layer),
        reference: scoring.reference.to_string(),
        threshold: scoring.threshold,
        results,
        best_alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInterpretation {
    pub layer: usize,
    pub text: String,
    pub score: f32,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualizationReport {
    pub position: usize,
    pub threshold: f32,
    /// First layer whose α=1 hidden-state interpretation clears the threshold.
    pub layer_c: Option<usize>,
    /// Layers 1..=L in order.
    pub per_layer: Vec<LayerInterpretation>,
}

/// Smallest 1-based layer whose score clears `threshold`.
pub fn first_passing_layer(scores: &[f32], threshold: f32) -> Option<usize> {
    scores.iter().position(|&s| s >= threshold).map(|i| i + 1)
}

/// Interpret the hidden state at `position` for every layer 1..=L with α = 1.
pub fn find_contextualization_layer(
    bundle: &ModelBundle,
    trace: &ActivationTrace,
    position: usize,
    spec: &PatchSpec,
    scoring: &Scoring<'_>,
) -> Result<ContextualizationReport> {
    if !(scoring.threshold > 0.0 && scoring.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {}",
            scoring.threshold
        )));
    }
    ReprSelector::new(ReprKind::HiddenState, 0, position)
        .validate(trace.n_layers(), trace.n_positions())?;
    let per_layer = (1..=trace.n_layers())
        .into_par_iter()
        .map(|layer| {
            let sel = ReprSelector::new(ReprKind::HiddenState, layer, position);
            let r = interpret(bundle, trace, sel, Amplifier::IDENTITY, spec, Some(scoring))?;
            Ok(LayerInterpretation {
                layer,
                score: r.score.expect("scored"),
                success: r.success.expect("scored"),
                text: r.text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f32> = per_layer.iter().map(|l| l.score).collect();
    Ok(ContextualizationReport {
        position,
        threshold: scoring.threshold,
        layer_c: first_passing_layer(&scores, scoring.threshold),
        per_layer,
    })
}

/// Hidden-state sweeps below the contextualization layer, from `layer_c - 1`
/// down to 1.
pub fn backward_hidden_scan(
    bundle: &ModelBundle,
    trace: &ActivationTrace,
    position: usize,
    layer_c: usize,
    grid: &AlphaGrid,
    spec: &PatchSpec,
    scoring: &Scoring<'_>,
) -> Result<Vec<SweepReport>> {
    if layer_c > trace.n_layers() {
        return Err(Error::InvalidSelector(format!(
            "contextualization layer {layer_c} > {}",
            trace.n_layers()
        )));
    }
    (1..layer_c)
        .rev()
        .map(|layer| {
            let sel = ReprSelector::new(ReprKind::HiddenState, layer, position);
            sweep(bundle, trace, sel, grid, spec, scoring)
        })
        .collect()
}

/// Host-model mean-pooled cosine scorer.
pub fn default_scorer(bundle: Arc<ModelBundle>) -> ScorerHandle {
    Arc::new(HostModelScorer::new(bundle))
}

/// Default target spec: entity-description prompt, patch at the source layer.
pub fn default_spec() -> PatchSpec {
    PatchSpec {
        target_layer: TargetLayer::Same,
        ..PatchSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy, ModelConfig};
    use crate::scorer::{ConstantScorer, FnScorer};
    use crate::trace::forward_with_trace;

    fn setup() -> (ModelBundle, ActivationTrace) {
        let b = toy::random_bundle(ModelConfig::new(3, 16, 2, 257, 128).unwrap(), 11);
        let p = b.encode("Back to the Future").unwrap();
        let t = forward_with_trace(&b, &p).unwrap();
        (b, t)
    }

    fn spec() -> PatchSpec {
        PatchSpec::new("A: b, {}", TargetLayer::Same, 6).unwrap()
    }

    #[test]
    fn amplifier_validation() {
        for bad in [0.0, -1.0, f32::NAN, f32::INFINITY] {
            assert!(Amplifier::new(bad).is_err());
        }
        assert!(AlphaGrid::new(&[]).is_err());
        assert!(AlphaGrid::new(&[1.0, 1.0]).is_err());
        assert!(AlphaGrid::new(&[3.0, 1.0]).is_err());
        assert_eq!(AlphaGrid::default().alphas(), DEFAULT_ALPHAS.to_vec());
        let g: AlphaGrid = serde_json::from_str("[1, 2.5]").unwrap();
        assert_eq!(g.len(), 2);
        assert!(serde_json::from_str::<AlphaGrid>("[2, 1]").is_err());
    }

    #[test]
    fn amplify_cases() {
        let v = vec![1.5, -2.0, 0.25];
        assert_eq!(amplify(&v, Amplifier::IDENTITY).unwrap(), v);
        assert_eq!(amplify(&[0.0; 4], Amplifier::new(15.0).unwrap()).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            amplify(&[f32::MAX], Amplifier::new(2.0).unwrap()),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn alpha_one_matches_plain_patch() {
        let (b, t) = setup();
        let sel = ReprSelector::new(ReprKind::MlpOutput, 2, 4);
        let r = interpret(&b, &t, sel, Amplifier::IDENTITY, &spec(), None).unwrap();
        let raw = select_repr(&t, sel).unwrap();
        let direct = patch_generate(&b, &spec().resolved(2), &raw).unwrap();
        assert_eq!(r, direct);
    }

    #[test]
    fn best_alpha_tie_breaks_low() {
        let mk = |alpha, score| InterpretationResult {
            text: String::new(),
            token_ids: vec![],
            alpha,
            score: Some(score),
            success: None,
        };
        assert_eq!(best_alpha(&[mk(1.0, 0.2), mk(3.0, 0.5), mk(6.0, 0.5)]), Some(3.0));
        assert_eq!(best_alpha(&[mk(1.0, 0.4), mk(3.0, 0.4)]), Some(1.0));
        assert_eq!(best_alpha(&[]), None);
    }

    #[test]
    fn sweep_covers_grid() {
        let (b, t) = setup();
        let scorer = ConstantScorer(0.5);
        let scoring = Scoring::with_default_threshold(&scorer, "1985 film").unwrap();
        let sel = ReprSelector::new(ReprKind::MlpOutput, 1, 4);
        let rep = sweep(&b, &t, sel, &AlphaGrid::default(), &spec(), &scoring).unwrap();
        assert_eq!(rep.results.iter().map(|r| r.alpha).collect::<Vec<_>>(), DEFAULT_ALPHAS.to_vec());
        assert_eq!(rep.spec.target_layer, TargetLayer::Layer(1));
        // all distinct texts score 0.5: tie -> smallest alpha, unless a text
        // happens to equal the reference
        assert_eq!(rep.best_alpha, 1.0);
        let single = sweep(&b, &t, sel, &AlphaGrid::new(&[6.0]).unwrap(), &spec(), &scoring).unwrap();
        assert_eq!(single.best_alpha, 6.0);
    }

    #[test]
    fn contextualization_with_constant_scorers() {
        let (b, t) = setup();
        let one = FnScorer(|_: &str, _: &str| 1.0);
        let s = Scoring::with_default_threshold(&one, "ref").unwrap();
        let rep = find_contextualization_layer(&b, &t, 4, &spec(), &s).unwrap();
        assert_eq!(rep.layer_c, Some(1));
        assert_eq!(rep.per_layer.len(), 3);
        let zero = FnScorer(|_: &str, _: &str| 0.0);
        let s = Scoring::with_default_threshold(&zero, "ref").unwrap();
        let rep = find_contextualization_layer(&b, &t, 4, &spec(), &s).unwrap();
        assert_eq!(rep.layer_c, None);
        let bad = Scoring::new(&zero, "ref", 1.0).unwrap();
        assert!(find_contextualization_layer(&b, &t, 4, &spec(), &bad).is_err());
        assert!(find_contextualization_layer(&b, &t, 99, &spec(), &s).is_err());
    }

    #[test]
    fn first_passing_is_inclusive() {
        assert_eq!(first_passing_layer(&[0.1, 0.3, 0.9], 0.3), Some(2));
        assert_eq!(first_passing_layer(&[0.1, 0.2], 0.3), None);
    }

    #[test]
    fn backward_scan_ordering() {
        let (b, t) = setup();
        let scorer = ConstantScorer(0.1);
        let s = Scoring::with_default_threshold(&scorer, "ref").unwrap();
        let grid = AlphaGrid::new(&[1.0, 3.0]).unwrap();
        assert!(backward_hidden_scan(&b, &t, 4, 1, &grid, &spec(), &s).unwrap().is_empty());
        let reps = backward_hidden_scan(&b, &t, 4, 3, &grid, &spec(), &s).unwrap();
        assert_eq!(reps.iter().map(|r| r.selector.layer).collect::<Vec<_>>(), vec![2, 1]);
        assert!(backward_hidden_scan(&b, &t, 4, 4, &grid, &spec(), &s).is_err());
    }

    #[test]
    fn sweep_is_deterministic() {
        let (b, t) = setup();
        let scorer = default_scorer(Arc::new(b.clone()));
        let s = Scoring::with_default_threshold(scorer.as_ref(), "American film").unwrap();
        let sel = ReprSelector::new(ReprKind::HiddenState, 2, 4);
        let a = sweep(&b, &t, sel, &AlphaGrid::default(), &spec(), &s).unwrap();
        let c = sweep(&b, &t, sel, &AlphaGrid::default(), &spec(), &s).unwrap();
        assert_eq!(a, c);
        for r in &a.results {
            assert!(r.score.unwrap() <= a.best().score.unwrap());
        }
    }
}
