// SPDX-License-Identifier: MIT OR Apache-2.0

//! Batch evaluation over a prompt corpus: every (entry, layer, α) is
//! interpreted and scored, and per-layer success counts compare amplified
//! interpretation (any α) against plain α = 1 patching.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::patching::PatchSpec;
use crate::scorer::{Scorer, DEFAULT_THRESHOLD};
use crate::superscopes::{interpret, AlphaGrid, Amplifier, Scoring};
use crate::trace::{forward_with_trace, last_subject_position, ReprKind, ReprSelector};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 9] = [
    "prompt_id", "kind", "layer", "position", "alpha", "text", "score", "success", "error",
];

const STARTER_CORPUS: &str = include_str!("../data/starter_corpus.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    /// Defaults to the entry's index when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub source_prompt: String,
    pub subject: String,
    pub reference: String,
    /// 1-based token position; the last subject token when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl CorpusEntry {
    fn validate(&self) -> Result<()> {
        if self.position.is_none() && !self.source_prompt.contains(&self.subject) {
            return Err(Error::SubjectNotFound(self.subject.clone()));
        }
        if self.reference.is_empty() {
            return Err(Error::InvalidArgument("reference must not be empty".into()));
        }
        Ok(())
    }
}

pub fn parse_corpus(json: &str) -> Result<Vec<CorpusEntry>> {
    let corpus: Vec<CorpusEntry> = serde_json::from_str(json)?;
    corpus.iter().try_for_each(CorpusEntry::validate)?;
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_corpus(&raw)
}

/// The ten-entry corpus shipped with the crate.
pub fn starter_corpus() -> Vec<CorpusEntry> {
    parse_corpus(STARTER_CORPUS).expect("bundled corpus is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub prompt_id: String,
    pub kind: ReprKind,
    pub layer: usize,
    /// 0 when the position could not be resolved.
    pub position: usize,
    pub alpha: f32,
    pub text: String,
    pub score: Option<f32>,
    pub success: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    /// Entries where some α in the grid succeeded.
    pub superscopes_successes: usize,
    /// Entries where α = 1 succeeded.
    pub patchscopes_successes: usize,
    pub total: usize,
}

/// Layer → counts.
pub type LayerSuccessTable = BTreeMap<usize, LayerCounts>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub kind: ReprKind,
    pub layers: Vec<usize>,
    pub grid: AlphaGrid,
    pub spec: PatchSpec,
    pub threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kind: ReprKind::MlpOutput,
            layers: (1..=7).collect(),
            grid: AlphaGrid::default(),
            spec: PatchSpec::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub rows: Vec<EvalRow>,
    pub layer_table: LayerSuccessTable,
}

fn entry_id(entry: &CorpusEntry, index: usize) -> String {
    entry.id.clone().unwrap_or_else(|| index.to_string())
}

fn error_rows(id: &str, cfg: &EvalConfig, position: usize, err: &Error) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for &layer in &cfg.layers {
        for alpha in cfg.grid.alphas() {
            rows.push(EvalRow {
                prompt_id: id.to_string(),
                kind: cfg.kind,
                layer,
                position,
                alpha,
                text: String::new(),
                score: None,
                success: None,
                error: Some(format!("{}: {err}", err.code())),
            });
        }
    }
    rows
}

fn eval_entry(
    bundle: &ModelBundle,
    entry: &CorpusEntry,
    id: &str,
    cfg: &EvalConfig,
    scorer: &dyn Scorer,
) -> Vec<EvalRow> {
    let prepared = (|| {
        entry.validate()?;
        let prompt = bundle.encode(&entry.source_prompt)?;
        let position = match entry.position {
            Some(p) => p,
            None => last_subject_position(&prompt, &entry.subject)?,
        };
        let trace = forward_with_trace(bundle, &prompt)?;
        Ok::<_, Error>((position, trace))
    })();
    let (position, trace) = match prepared {
        Ok(v) => v,
        Err(e) => return error_rows(id, cfg, entry.position.unwrap_or(0), &e),
    };
    let scoring = Scoring {
        scorer,
        reference: &entry.reference,
        threshold: cfg.threshold,
    };
    let mut rows = Vec::with_capacity(cfg.layers.len() * cfg.grid.len());
    for &layer in &cfg.layers {
        let sel = ReprSelector::new(cfg.kind, layer, position);
        for &amp in cfg.grid.amplifiers() {
            let row = match interpret(bundle, &trace, sel, amp, &cfg.spec, Some(&scoring)) {
                Ok(r) => EvalRow {
                    prompt_id: id.to_string(),
                    kind: cfg.kind,
                    layer,
                    position,
                    alpha: amp.alpha(),
                    text: r.text,
                    score: r.score,
                    success: r.success,
                    error: None,
                },
                Err(e) => EvalRow {
                    prompt_id: id.to_string(),
                    kind: cfg.kind,
                    layer,
                    position,
                    alpha: amp.alpha(),
                    text: String::new(),
                    score: None,
                    success: None,
                    error: Some(format!("{}: {e}", e.code())),
                },
            };
            rows.push(row);
        }
    }
    rows
}

/// Aggregate rows into per-layer counts. `total` counts entries per layer.
pub fn layer_table(rows: &[EvalRow], layers: &[usize]) -> LayerSuccessTable {
    let mut table: LayerSuccessTable = layers.iter().map(|&l| (l, LayerCounts::default())).collect();
    let mut per_entry: BTreeMap<(usize, &str), (bool, bool)> = BTreeMap::new();
    for r in rows {
        let slot = per_entry.entry((r.layer, &r.prompt_id)).or_default();
        let ok = r.success == Some(true);
        slot.0 |= ok;
        slot.1 |= ok && r.alpha == Amplifier::IDENTITY.alpha();
    }
    for ((layer, _), (any, identity)) in per_entry {
        let c = table.entry(layer).or_default();
        c.total += 1;
        c.superscopes_successes += any as usize;
        c.patchscopes_successes += identity as usize;
    }
    table
}

/// Interpret every (entry, layer, α). Per-entry failures become rows with an
/// error marker. Rows are ordered by corpus entry, then layer, then α.
pub fn run_eval(
    bundle: &ModelBundle,
    corpus: &[CorpusEntry],
    cfg: &EvalConfig,
    scorer: &dyn Scorer,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    if cfg.layers.is_empty() {
        return Err(Error::InvalidArgument("no layers requested".into()));
    }
    let n_layers = bundle.config().n_layers;
    if let Some(&bad) = cfg.layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(Error::InvalidSelector(format!("layer {bad} outside 1..={n_layers}")));
    }
    if !cfg.grid.contains_identity() {
        return Err(Error::InvalidArgument(
            "alpha grid must contain 1 so the unamplified baseline is measured".into(),
        ));
    }
    let rows: Vec<EvalRow> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, entry)| eval_entry(bundle, entry, &entry_id(entry, i), cfg, scorer))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let layer_table = layer_table(&rows, &cfg.layers);
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        rows,
        layer_table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

impl ReportFormat {
    /// From a file extension, defaulting to JSON.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn report_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

pub fn parse_report_json(s: &str) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_str(s)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaViolation(format!(
            "report schema version {} (expected {SCHEMA_VERSION})",
            report.schema_version
        )));
    }
    Ok(report)
}

pub fn parse_report_csv(s: &str) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::SchemaViolation(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Write the report to `path` in the requested format.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let body = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(&report.rows)?,
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
