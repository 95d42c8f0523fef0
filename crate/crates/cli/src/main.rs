// SPDX-License-Identifier: MIT OR Apache-2.0

//! `superscopes` — trace, patch and interpret residual-stream components of a
//! GPT-2-class model from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 model/load error, 3 runtime error.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use superscopes_core::harness::{self, EvalConfig, ReportFormat};
use superscopes_core::model::{load_model, ModelBundle};
use superscopes_core::patching::{PatchSpec, TargetLayer, DEFAULT_MAX_NEW_TOKENS, DEFAULT_TARGET_PROMPT};
use superscopes_core::scorer::{EmbeddingFileScorer, ScorerHandle, DEFAULT_THRESHOLD};
use superscopes_core::superscopes::{
    backward_hidden_scan, default_scorer, find_contextualization_layer, interpret, sweep, AlphaGrid, Amplifier,
    Scoring,
};
use superscopes_core::trace::{forward_with_trace, last_subject_position, ActivationTrace, ReprKind, ReprSelector};
use superscopes_service::SessionConfig;

#[derive(Parser, Debug)]
#[command(name = "superscopes", version, about = "Amplified residual-stream interpretation for GPT-2-class models")]
struct Cli {
    /// Directory with config.json, model.safetensors, vocab.json, merges.txt
    #[arg(long, global = true, env = "SUPERSCOPES_MODEL_DIR")]
    model_dir: Option<PathBuf>,

    /// Machine-readable output on stdout
    #[arg(long, global = true)]
    json: bool,

    /// JSON manifest {text: key} for precomputed embeddings (replaces the host-model scorer)
    #[arg(long, global = true, requires = "embeddings")]
    embedding_manifest: Option<PathBuf>,

    /// Tensor file with one embedding per manifest key
    #[arg(long, global = true, requires = "embedding_manifest")]
    embeddings: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Capture hidden / pre-MLP / MLP-output vectors for every layer and position
    Trace {
        #[arg(long)]
        prompt: String,
        /// Raw tensor dump (safetensors)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpret one (amplified) representation
    Interpret {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 1.0)]
        alpha: f32,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Interpret one representation at every α of a grid and pick the best
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12,15")]
        alphas: Vec<f32>,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        reference: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
    },
    /// Find the first layer whose hidden state reads as the reference, then
    /// sweep amplified hidden states below it
    Contextualize {
        #[command(flatten)]
        position: Position,
        #[arg(long)]
        reference: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        /// Grid for the backward scan below the contextualization layer
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12,15")]
        alphas: Vec<f32>,
        /// Skip the backward scan
        #[arg(long)]
        no_backward: bool,
        #[command(flatten)]
        target: Target,
    },
    /// Batch evaluation over a corpus
    Eval {
        /// JSON array of {id?, source_prompt, subject, reference, position?}; the bundled starter corpus by default
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Layer range, e.g. 1-7 or 2,4,6
        #[arg(long, default_value = "1-7")]
        layers: String,
        #[arg(long, value_parser = parse_kind, default_value = "mlp")]
        kind: ReprKind,
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12,15")]
        alphas: Vec<f32>,
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        /// Report file; .csv for CSV, anything else JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP API (and static UI) on a loopback address
    Serve {
        #[arg(long, default_value = superscopes_service::DEFAULT_BIND)]
        bind: SocketAddr,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_TARGET_PROMPT)]
        target_prompt: String,
        #[arg(long, value_delimiter = ',', default_value = "1,3,6,9,12,15")]
        alphas: Vec<f32>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
}

#[derive(Args, Debug)]
struct Position {
    #[arg(long)]
    prompt: String,
    /// Use the last token of the first occurrence of this substring
    #[arg(long, conflicts_with = "token_index")]
    subject: Option<String>,
    /// 1-based token position (default: last token)
    #[arg(long)]
    token_index: Option<usize>,
}

#[derive(Args, Debug)]
struct Source {
    #[command(flatten)]
    position: Position,
    #[arg(long)]
    layer: usize,
    #[arg(long, value_parser = parse_kind, default_value = "hidden")]
    kind: ReprKind,
}

#[derive(Args, Debug)]
struct Target {
    /// 0 (embedding output), same (source layer) or a layer number
    #[arg(long, value_parser = parse_target_layer, default_value = "same")]
    target_layer: TargetLayer,
    /// Must contain exactly one {} marker
    #[arg(long, default_value = DEFAULT_TARGET_PROMPT)]
    target_prompt: String,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    max_new_tokens: usize,
}

fn parse_kind(s: &str) -> Result<ReprKind, String> {
    s.parse().map_err(|e: superscopes_core::Error| e.to_string())
}

fn parse_target_layer(s: &str) -> Result<TargetLayer, String> {
    s.parse().map_err(|e: superscopes_core::Error| e.to_string())
}

/// Failure classes, one per non-zero exit code.
enum Failure {
    Usage(anyhow::Error),
    Load(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Load(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

struct Ctx {
    bundle: Arc<ModelBundle>,
    scorer: ScorerHandle,
    json: bool,
}

fn load(cli: &Cli) -> Outcome<Ctx> {
    let dir = cli
        .model_dir
        .as_ref()
        .ok_or_else(|| usage(anyhow!("--model-dir (or SUPERSCOPES_MODEL_DIR) is required")))?;
    let bundle = Arc::new(
        load_model(dir)
            .with_context(|| format!("loading model from {}", dir.display()))
            .map_err(Failure::Load)?,
    );
    let scorer = external_scorer(cli)?.unwrap_or_else(|| default_scorer(bundle.clone()));
    Ok(Ctx {
        bundle,
        scorer,
        json: cli.json,
    })
}

fn external_scorer(cli: &Cli) -> Outcome<Option<ScorerHandle>> {
    match (&cli.embedding_manifest, &cli.embeddings) {
        (Some(m), Some(t)) => {
            let s = EmbeddingFileScorer::from_files(m, t).context("loading embeddings").map_err(Failure::Load)?;
            Ok(Some(Arc::new(s)))
        }
        _ => Ok(None),
    }
}

fn resolve_position(bundle: &ModelBundle, p: &Position) -> Outcome<(ActivationTrace, usize)> {
    let seq = bundle.encode(&p.prompt).map_err(usage)?;
    if seq.is_empty() {
        return Err(usage(anyhow!("--prompt must not be empty")));
    }
    let position = match (&p.subject, p.token_index) {
        (Some(s), _) => last_subject_position(&seq, s).map_err(usage)?,
        (None, Some(i)) => i,
        (None, None) => seq.len(),
    };
    if position == 0 || position > seq.len() {
        return Err(usage(anyhow!("token index {position} outside 1..={}", seq.len())));
    }
    let trace = forward_with_trace(bundle, &seq).map_err(runtime)?;
    Ok((trace, position))
}

fn target_spec(bundle: &ModelBundle, t: &Target) -> Outcome<PatchSpec> {
    let spec = PatchSpec::new(&t.target_prompt, t.target_layer, t.max_new_tokens).map_err(usage)?;
    if let TargetLayer::Layer(l) = t.target_layer {
        if l > bundle.config().n_layers {
            return Err(usage(anyhow!("--target-layer {l} > {}", bundle.config().n_layers)));
        }
    }
    Ok(spec)
}

fn selector(bundle: &ModelBundle, trace: &ActivationTrace, s: &Source, position: usize) -> Outcome<ReprSelector> {
    let sel = ReprSelector::new(s.kind, s.layer, position);
    sel.validate(bundle.config().n_layers, trace.n_positions()).map_err(usage)?;
    Ok(sel)
}

fn scoring<'a>(ctx: &'a Ctx, reference: &'a str, threshold: f32) -> Outcome<Scoring<'a>> {
    Scoring::new(ctx.scorer.as_ref(), reference, threshold).map_err(usage)
}

fn emit<T: Serialize>(ctx: &Ctx, value: &T, human: impl FnOnce()) -> Outcome<()> {
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(value).map_err(runtime)?);
    } else {
        human();
    }
    Ok(())
}

fn fmt_score(score: Option<f32>, success: Option<bool>) -> String {
    match (score, success) {
        (Some(s), Some(ok)) => format!("  score {s:.3}{}", if ok { " ✓" } else { "" }),
        _ => String::new(),
    }
}

#[derive(Serialize)]
struct InterpretOut<'a> {
    selector: ReprSelector,
    token: &'a str,
    target_layer: usize,
    #[serde(flatten)]
    result: &'a superscopes_core::patching::InterpretationResult,
}

fn run(cli: Cli) -> Outcome<()> {
    if let Command::Serve { .. } = cli.command {
        return serve(cli);
    }
    let ctx = load(&cli)?;
    let b = &*ctx.bundle;
    match &cli.command {
        Command::Trace { prompt, out } => {
            let seq = b.encode(prompt).map_err(usage)?;
            if seq.is_empty() {
                return Err(usage(anyhow!("--prompt must not be empty")));
            }
            let trace = forward_with_trace(b, &seq).map_err(runtime)?;
            if let Some(path) = out {
                trace.save_tensors(path).map_err(runtime)?;
            }
            let summary = trace.summary();
            emit(&ctx, &summary, || {
                println!("{} tokens, {} layers, d = {}", seq.len(), summary.n_layers, summary.d_model);
                println!("‖h‖ per layer (rows) and token (columns):");
                let header: Vec<String> = summary.tokens.iter().map(|t| format!("{t:?}")).collect();
                println!("      {}", header.join(" "));
                for (l, row) in summary.hidden_norms.iter().enumerate() {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:8.2}")).collect();
                    println!("{l:>4}  {}", cells.join(" "));
                }
            })
        }
        Command::Interpret { source, alpha, target, reference, threshold } => {
            let amp = Amplifier::new(*alpha).map_err(usage)?;
            let spec = target_spec(b, target)?;
            let (trace, position) = resolve_position(b, &source.position)?;
            let sel = selector(b, &trace, source, position)?;
            let scoring = reference.as_deref().map(|r| scoring(&ctx, r, *threshold)).transpose()?;
            let r = interpret(b, &trace, sel, amp, &spec, scoring.as_ref()).map_err(runtime)?;
            let out = InterpretOut {
                selector: sel,
                token: &trace.prompt().texts[position - 1],
                target_layer: spec.target_layer.resolve(sel.layer),
                result: &r,
            };
            emit(&ctx, &out, || {
                println!(
                    "{} layer {} token {:?} (α = {}) → {:?}{}",
                    sel.kind,
                    sel.layer,
                    out.token,
                    r.alpha,
                    r.text,
                    fmt_score(r.score, r.success)
                );
            })
        }
        Command::Sweep { source, alphas, target, reference, threshold } => {
            let grid = AlphaGrid::new(alphas).map_err(usage)?;
            let spec = target_spec(b, target)?;
            let (trace, position) = resolve_position(b, &source.position)?;
            let sel = selector(b, &trace, source, position)?;
            let scoring = scoring(&ctx, reference, *threshold)?;
            let rep = sweep(b, &trace, sel, &grid, &spec, &scoring).map_err(runtime)?;
            emit(&ctx, &rep, || {
                for r in &rep.results {
                    let mark = if r.alpha == rep.best_alpha { "*" } else { " " };
                    println!("{mark} α = {:<5} {:?}{}", r.alpha, r.text, fmt_score(r.score, r.success));
                }
                println!("best α = {}", rep.best_alpha);
            })
        }
        Command::Contextualize { position, reference, threshold, alphas, no_backward, target } => {
            let grid = AlphaGrid::new(alphas).map_err(usage)?;
            let spec = target_spec(b, target)?;
            let (trace, position) = resolve_position(b, position)?;
            let scoring = scoring(&ctx, reference, *threshold)?;
            let rep = find_contextualization_layer(b, &trace, position, &spec, &scoring).map_err(|e| match e {
                superscopes_core::Error::InvalidArgument(_) => usage(e),
                e => runtime(e),
            })?;
            let backward = match (rep.layer_c, no_backward) {
                (Some(lc), false) => {
                    backward_hidden_scan(b, &trace, position, lc, &grid, &spec, &scoring).map_err(runtime)?
                }
                _ => Vec::new(),
            };
            #[derive(Serialize)]
            struct Out<'a> {
                #[serde(flatten)]
                report: &'a superscopes_core::superscopes::ContextualizationReport,
                backward: &'a [superscopes_core::superscopes::SweepReport],
            }
            emit(&ctx, &Out { report: &rep, backward: &backward }, || {
                for l in &rep.per_layer {
                    println!("layer {:>2}  {:?}{}", l.layer, l.text, fmt_score(Some(l.score), Some(l.success)));
                }
                match rep.layer_c {
                    Some(lc) => println!("contextualization layer ℓ_c = {lc}"),
                    None => println!("no layer reaches the threshold {}", rep.threshold),
                }
                for s in &backward {
                    let best = s.best();
                    println!(
                        "layer {:>2}  best α = {:<5} {:?}{}",
                        s.selector.layer,
                        s.best_alpha,
                        best.text,
                        fmt_score(best.score, best.success)
                    );
                }
            })
        }
        Command::Eval { corpus, layers, kind, alphas, target, threshold, out } => {
            let corpus = match corpus {
                Some(p) => harness::load_corpus(p).map_err(usage)?,
                None => harness::starter_corpus(),
            };
            let cfg = EvalConfig {
                kind: *kind,
                layers: parse_layers(layers).map_err(usage)?,
                grid: AlphaGrid::new(alphas).map_err(usage)?,
                spec: target_spec(b, target)?,
                threshold: *threshold,
            };
            let report = harness::run_eval(b, &corpus, &cfg, ctx.scorer.as_ref()).map_err(|e| match e {
                superscopes_core::Error::InvalidSelector(_) | superscopes_core::Error::InvalidArgument(_) => usage(e),
                e => runtime(e),
            })?;
            if let Some(path) = out {
                harness::emit_report(&report, ReportFormat::for_path(path), path).map_err(runtime)?;
            }
            emit(&ctx, &report, || {
                let errors = report.rows.iter().filter(|r| r.error.is_some()).count();
                println!("{} rows ({} with errors)", report.rows.len(), errors);
                println!("layer  superscopes  patchscopes  total");
                for (l, c) in &report.layer_table {
                    println!(
                        "{l:>5}  {:>11}  {:>11}  {:>5}",
                        c.superscopes_successes, c.patchscopes_successes, c.total
                    );
                }
            })
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
}

fn parse_layers(s: &str) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    anyhow::bail!("empty layer range {part}");
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse()?),
        }
    }
    if out.is_empty() {
        anyhow::bail!("no layers given");
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn serve(cli: Cli) -> Outcome<()> {
    let Command::Serve { bind, static_dir, target_prompt, alphas, threshold, max_new_tokens } = &cli.command else {
        unreachable!()
    };
    let dir = cli
        .model_dir
        .clone()
        .ok_or_else(|| usage(anyhow!("--model-dir (or SUPERSCOPES_MODEL_DIR) is required")))?;
    PatchSpec::new(target_prompt, TargetLayer::Same, *max_new_tokens).map_err(usage)?;
    let config = SessionConfig {
        model_dir: dir,
        target_prompt: target_prompt.clone(),
        grid: AlphaGrid::new(alphas).map_err(usage)?,
        threshold: *threshold,
        max_new_tokens: *max_new_tokens,
        bind: *bind,
        static_dir: static_dir.clone(),
    };
    let scorer = external_scorer(&cli)?;
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(superscopes_service::serve(config, scorer)).map_err(|e| match e {
        superscopes_service::ServeError::Load(e) => Failure::Load(e.into()),
        e => runtime(e),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, err) = match &f {
                Failure::Usage(e) => ("usage error", e),
                Failure::Load(e) => ("load error", e),
                Failure::Runtime(e) => ("error", e),
            };
            eprintln!("superscopes: {kind}: {err:#}");
            ExitCode::from(f.exit_code())
        }
    }
}
