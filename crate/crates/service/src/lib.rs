// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP facade over the workbench. One model per process; every request runs
//! an independent generation session against the shared read-only bundle.

pub mod api;
pub mod error;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use superscopes_core::model::{load_model, ModelBundle};
use superscopes_core::patching::{DEFAULT_MAX_NEW_TOKENS, DEFAULT_TARGET_PROMPT};
use superscopes_core::scorer::{ScorerHandle, DEFAULT_THRESHOLD};
use superscopes_core::superscopes::{default_scorer, AlphaGrid};
use tower_http::services::ServeDir;

pub use error::ApiError;

pub const DEFAULT_BIND: &str = "127.0.0.1:8077";

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub model_dir: PathBuf,
    pub target_prompt: String,
    pub grid: AlphaGrid,
    pub threshold: f32,
    pub max_new_tokens: usize,
    /// Loopback by default.
    pub bind: SocketAddr,
    /// Static UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl SessionConfig {
    pub fn new(model_dir: impl Into<PathBuf>) -> Self {
        SessionConfig {
            model_dir: model_dir.into(),
            target_prompt: DEFAULT_TARGET_PROMPT.to_string(),
            grid: AlphaGrid::default(),
            threshold: DEFAULT_THRESHOLD,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            bind: DEFAULT_BIND.parse().expect("valid default address"),
            static_dir: None,
        }
    }
}

pub struct Loaded {
    pub bundle: Arc<ModelBundle>,
    pub scorer: ScorerHandle,
}

struct Inner {
    config: SessionConfig,
    model: OnceLock<Loaded>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// State with no model yet; model endpoints answer 503 until [`install`](Self::install).
    pub fn new(config: SessionConfig) -> Self {
        AppState(Arc::new(Inner {
            config,
            model: OnceLock::new(),
        }))
    }

    /// Install the model; `scorer` defaults to the host-model scorer.
    /// Returns false if a model was already installed.
    pub fn install(&self, bundle: Arc<ModelBundle>, scorer: Option<ScorerHandle>) -> bool {
        let scorer = scorer.unwrap_or_else(|| default_scorer(bundle.clone()));
        self.0.model.set(Loaded { bundle, scorer }).is_ok()
    }

    pub fn with_model(config: SessionConfig, bundle: Arc<ModelBundle>, scorer: Option<ScorerHandle>) -> Self {
        let s = Self::new(config);
        s.install(bundle, scorer);
        s
    }

    pub fn is_loaded(&self) -> bool {
        self.0.model.get().is_some()
    }

    pub fn config(&self) -> &SessionConfig {
        &self.0.config
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let value: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request("invalid_json", format!("request body is not JSON: {e}")))?;
    if !value.is_object() {
        return Err(ApiError::bad_request("invalid_request", "request body must be a JSON object"));
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let mut err = ApiError::bad_request("invalid_request", e.inner().to_string());
        if path != "." {
            err = err.field(path.split(['.', '[']).next().unwrap_or(&path));
        } else if let Some(f) = missing_field(&e.inner().to_string()) {
            err = err.field(&f);
        }
        err
    })
}

fn missing_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("missing field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

type Handler<Req, Resp> = fn(&SessionConfig, &Loaded, Req) -> Result<Resp, ApiError>;

/// Parse, then run `f` on the blocking pool.
async fn run<Req, Resp>(state: AppState, body: Bytes, f: Handler<Req, Resp>) -> Response
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    if !state.is_loaded() {
        return ApiError::not_loaded().into_response();
    }
    let req: Req = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let job = tokio::task::spawn_blocking(move || {
        let loaded = state.0.model.get().expect("checked above");
        f(&state.0.config, loaded, req)
    });
    match job.await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).into_response(),
    }
}

async fn health() -> Json<api::Health> {
    Json(api::Health { status: "ok" })
}

async fn model(State(s): State<AppState>) -> Response {
    match s.0.model.get() {
        Some(m) => Json(api::model_info(&s.0.config, m)).into_response(),
        None => ApiError::not_loaded().into_response(),
    }
}

async fn tokenize(State(s): State<AppState>, body: Bytes) -> Response {
    run(s, body, api::tokenize).await
}

async fn interpret(State(s): State<AppState>, body: Bytes) -> Response {
    run(s, body, api::interpret_endpoint).await
}

async fn sweep(State(s): State<AppState>, body: Bytes) -> Response {
    run(s, body, api::sweep_endpoint).await
}

async fn contextualize(State(s): State<AppState>, body: Bytes) -> Response {
    run(s, body, api::contextualize_endpoint).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config().static_dir.clone();
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(model))
        .route("/api/tokenize", post(tokenize))
        .route("/api/interpret", post(interpret))
        .route("/api/sweep", post(sweep))
        .route("/api/contextualize", post(contextualize))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

#[derive(Debug)]
pub enum ServeError {
    Bind(std::io::Error),
    Load(superscopes_core::Error),
    Serve(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Bind(e) => write!(f, "cannot bind: {e}"),
            ServeError::Load(e) => write!(f, "cannot load model: {e}"),
            ServeError::Serve(e) => write!(f, "server error: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

/// Bind, start answering (503 on model endpoints while loading), load the
/// model in the background, and serve until Ctrl-C. A failed load stops the
/// server and is returned as [`ServeError::Load`].
pub async fn serve(config: SessionConfig, scorer: Option<ScorerHandle>) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(ServeError::Bind)?;
    tracing::info!("listening on http://{}", listener.local_addr().map_err(ServeError::Bind)?);
    let state = AppState::new(config.clone());
    let (fail_tx, mut fail_rx) = tokio::sync::mpsc::channel::<superscopes_core::Error>(1);
    let loader_state = state.clone();
    tokio::task::spawn_blocking(move || match load_model(&config.model_dir) {
        Ok(bundle) => {
            tracing::info!(hash = bundle.fingerprint(), "model loaded");
            loader_state.install(Arc::new(bundle), scorer);
        }
        Err(e) => {
            let _ = fail_tx.blocking_send(e);
        }
    });
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<Option<superscopes_core::Error>>();
    tokio::spawn(async move {
        let reason = tokio::select! {
            _ = tokio::signal::ctrl_c() => None,
            Some(e) = fail_rx.recv() => Some(e),
        };
        let _ = stop_tx.send(reason);
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            if let Ok(reason) = stop_rx.await {
                *slot.lock().unwrap() = reason;
            }
        })
        .await
        .map_err(ServeError::Serve)?;
    let failed = failure.lock().unwrap().take();
    match failed {
        Some(e) => Err(ServeError::Load(e)),
        None => Ok(()),
    }
}
