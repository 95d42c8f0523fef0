// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted request suite for the HTTP contract: status codes, structured
//! errors, response schemas from docs/openapi.json, and endpoint semantics.
//! Shared by the service tests and the acceptance target.

#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use superscopes_core::model::{load_model, toy, ModelBundle, ModelConfig};
use superscopes_core::patching::{baseline_generate, resolve_placeholder, PatchSpec, TargetLayer};
use superscopes_core::scorer::{ConstantScorer, FnScorer, Scorer, ScorerHandle};
use superscopes_core::trace::last_subject_position;
use superscopes_core::Error;
use superscopes_service::{router, AppState, SessionConfig};
use tower::ServiceExt;

pub fn toy_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

pub fn toy_bundle() -> Arc<ModelBundle> {
    Arc::new(load_model(&toy_dir()).expect("toy fixture"))
}

pub fn openapi() -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/openapi.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Target prompt short enough for the toy context window.
pub const TARGET: &str = "Syria: Country in the Middle East, {}";

pub fn app(bundle: Arc<ModelBundle>, scorer: Option<ScorerHandle>) -> Router {
    let mut cfg = SessionConfig::new(toy_dir());
    cfg.target_prompt = TARGET.to_string();
    cfg.max_new_tokens = 8;
    router(AppState::with_model(cfg, bundle, scorer))
}

pub fn unloaded_app() -> Router {
    router(AppState::new(SessionConfig::new(toy_dir())))
}

pub async fn call(app: &Router, method: Method, path: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

pub async fn post(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, path, Some(&body.to_string())).await
}

pub async fn get(app: &Router, path: &str) -> (StatusCode, Value) {
    call(app, Method::GET, path, None).await
}

/// Validate `body` against the documented response schema for
/// `(method, path, status)`. Undocumented status codes fail.
pub fn check_schema(doc: &Value, method: &str, path: &str, status: StatusCode, body: &Value) -> Result<(), String> {
    let op = &doc["paths"][path][method];
    let resp = &op["responses"][status.as_str()];
    let schema_ref = resp["content"]["application/json"]["schema"]["$ref"]
        .as_str()
        .ok_or_else(|| format!("{method} {path}: status {status} is not documented"))?;
    validate_ref(doc, schema_ref, body)
}

pub fn validate_ref(doc: &Value, schema_ref: &str, body: &Value) -> Result<(), String> {
    let schema = json!({"$ref": schema_ref, "components": doc["components"]});
    let v = jsonschema::draft202012::new(&schema).map_err(|e| e.to_string())?;
    let errs: Vec<String> = v.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(format!("{schema_ref}: {}", errs.join("; ")))
    }
}

pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

struct Suite {
    doc: Value,
    checks: Vec<Check>,
}

impl Suite {
    fn record(&mut self, name: &str, result: Result<(), String>) {
        let (ok, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(Check {
            name: name.to_string(),
            ok,
            detail,
        });
    }

    /// Request, then check status, schema and (for errors) the field.
    async fn expect(
        &mut self,
        name: &str,
        app: &Router,
        path: &str,
        body: Option<Value>,
        status: StatusCode,
        field: Option<&str>,
    ) -> Value {
        let (method, (got, value)) = match &body {
            Some(b) => ("post", post(app, path, b.clone()).await),
            None => ("get", get(app, path).await),
        };
        let mut result = if got == status {
            Ok(())
        } else {
            Err(format!("expected {status}, got {got}: {value}"))
        };
        if result.is_ok() {
            result = check_schema(&self.doc, method, path, got, &value);
        }
        if result.is_ok() && field.is_some() && value["field"].as_str() != field {
            result = Err(format!("expected field {field:?}, got {}", value["field"]));
        }
        self.record(name, result);
        value
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Failing;

impl Scorer for Failing {
    fn score(&self, _: &str, _: &str) -> superscopes_core::Result<f32> {
        Err(Error::MissingEmbedding("scorer offline".into()))
    }

    fn name(&self) -> &str {
        "failing"
    }
}

/// Run the full scripted suite against the toy fixture.
pub async fn run_contract_suite() -> Vec<Check> {
    let mut s = Suite {
        doc: openapi(),
        checks: Vec::new(),
    };
    let bundle = toy_bundle();
    let n_layers = bundle.config().n_layers;
    let app0 = app(bundle.clone(), Some(Arc::new(ConstantScorer(0.5))));

    // lifecycle
    s.expect("health", &app0, "/api/health", None, StatusCode::OK, None).await;
    let cold = unloaded_app();
    s.expect("model before load", &cold, "/api/model", None, StatusCode::SERVICE_UNAVAILABLE, None).await;
    s.expect("tokenize before load", &cold, "/api/tokenize", Some(json!({"prompt": "x"})), StatusCode::SERVICE_UNAVAILABLE, None)
        .await;
    s.expect("health before load", &cold, "/api/health", None, StatusCode::OK, None).await;

    let info = s.expect("model info", &app0, "/api/model", None, StatusCode::OK, None).await;
    let r = ensure(
        info["config"]["n_layers"] == 4 && info["config"]["d_model"] == 32 && info["model_hash"] == bundle.fingerprint(),
        || format!("{info}"),
    );
    s.record("model info reflects config", r);
    let small = Arc::new(toy::random_bundle(ModelConfig::new(2, 8, 1, 257, 64).unwrap(), 1));
    let info = s.expect("small model info", &app(small, None), "/api/model", None, StatusCode::OK, None).await;
    s.record(
        "small model n_layers 2, d_model 8",
        ensure(info["config"]["n_layers"] == 2 && info["config"]["d_model"] == 8, || format!("{info}")),
    );

    // tokenize
    let body = s
        .expect("tokenize", &app0, "/api/tokenize", Some(json!({"prompt": "Diana, Princess of Wales"})), StatusCode::OK, None)
        .await;
    let want = bundle.encode("Diana, Princess of Wales").unwrap();
    let got: Vec<u64> = body["tokens"].as_array().map(|a| a.iter().map(|t| t["id"].as_u64().unwrap()).collect()).unwrap_or_default();
    s.record(
        "tokenize mirrors encode",
        ensure(got == want.ids.iter().map(|&i| i as u64).collect::<Vec<_>>() && body["tokens"][0]["position"] == 1, || {
            format!("{body}")
        }),
    );
    s.expect("tokenize empty", &app0, "/api/tokenize", Some(json!({"prompt": ""})), StatusCode::BAD_REQUEST, Some("prompt"))
        .await;
    s.expect(
        "tokenize overflow",
        &app0,
        "/api/tokenize",
        Some(json!({"prompt": "word ".repeat(400)})),
        StatusCode::PAYLOAD_TOO_LARGE,
        Some("prompt"),
    )
    .await;
    s.expect("tokenize missing field", &app0, "/api/tokenize", Some(json!({})), StatusCode::BAD_REQUEST, Some("prompt"))
        .await;
    s.expect("tokenize unknown field", &app0, "/api/tokenize", Some(json!({"prompt": "a", "x": 1})), StatusCode::BAD_REQUEST, None)
        .await;
    {
        let (st, v) = call(&app0, Method::POST, "/api/tokenize", Some("{not json")).await;
        let r = ensure(st == StatusCode::BAD_REQUEST, || format!("{st}"))
            .and_then(|_| check_schema(&s.doc, "post", "/api/tokenize", st, &v));
        s.record("tokenize malformed json", r);
    }

    // interpret: identity setup equals baseline
    let (seq, i_star) = resolve_placeholder(&bundle, TARGET).unwrap();
    for layer in [0, n_layers / 2, n_layers] {
        let body = s
            .expect(
                &format!("interpret identity layer {layer}"),
                &app0,
                "/api/interpret",
                Some(json!({"prompt": seq.text(), "position": i_star, "kind": "hidden", "layer": layer,
                            "alpha": 1, "target_layer": "same"})),
                StatusCode::OK,
                None,
            )
            .await;
        let base = baseline_generate(&bundle, &PatchSpec::new(TARGET, TargetLayer::Layer(layer), 8).unwrap()).unwrap();
        s.record(
            &format!("identity interpretation equals baseline (layer {layer})"),
            ensure(body["text"] == base.text.as_str() && body["score"].is_null(), || {
                format!("{} vs {:?}", body["text"], base.text)
            }),
        );
    }
    let diana = "Diana, Princess of Wales";
    let wales = last_subject_position(&bundle.encode(diana).unwrap(), diana).unwrap();
    let base_req = json!({"prompt": diana, "position": wales, "kind": "mlp", "layer": 2, "alpha": 6, "target_layer": 0});
    let with = |extra: Value| {
        let mut v = base_req.clone();
        for (k, x) in extra.as_object().unwrap() {
            v[k] = x.clone();
        }
        v
    };
    let body = s
        .expect("interpret scored", &app0, "/api/interpret", Some(with(json!({"reference": "British princess"}))), StatusCode::OK, None)
        .await;
    s.record(
        "interpret reports score and success together",
        ensure(body["score"].is_number() && body["success"].is_boolean() && body["target_layer"] == 0, || format!("{body}")),
    );
    let body = s
        .expect("interpret same layer", &app0, "/api/interpret", Some(with(json!({"target_layer": "same"}))), StatusCode::OK, None)
        .await;
    s.record("target layer same resolves to source layer", ensure(body["target_layer"] == 2, || format!("{body}")));

    let table: Vec<(&str, Value, StatusCode, Option<&str>)> = vec![
        ("interpret layer > L", json!({"layer": n_layers + 1}), StatusCode::UNPROCESSABLE_ENTITY, Some("layer")),
        ("interpret mlp at layer 0", json!({"layer": 0}), StatusCode::UNPROCESSABLE_ENTITY, Some("layer")),
        ("interpret position 0", json!({"position": 0}), StatusCode::UNPROCESSABLE_ENTITY, Some("position")),
        ("interpret position > n", json!({"position": 99}), StatusCode::UNPROCESSABLE_ENTITY, Some("position")),
        ("interpret target layer > L", json!({"target_layer": n_layers + 1}), StatusCode::UNPROCESSABLE_ENTITY, Some("target_layer")),
        ("interpret bad kind", json!({"kind": "attn"}), StatusCode::BAD_REQUEST, Some("kind")),
        ("interpret bad target layer", json!({"target_layer": "top"}), StatusCode::BAD_REQUEST, Some("target_layer")),
        ("interpret alpha 0", json!({"alpha": 0}), StatusCode::BAD_REQUEST, Some("alpha")),
        ("interpret negative alpha", json!({"alpha": -3}), StatusCode::BAD_REQUEST, Some("alpha")),
        ("interpret no marker", json!({"target_prompt": "no marker"}), StatusCode::BAD_REQUEST, Some("target_prompt")),
        ("interpret two markers", json!({"target_prompt": "{} {}"}), StatusCode::BAD_REQUEST, Some("target_prompt")),
        ("interpret empty prompt", json!({"prompt": ""}), StatusCode::BAD_REQUEST, Some("prompt")),
        ("interpret empty reference", json!({"reference": ""}), StatusCode::BAD_REQUEST, Some("reference")),
        ("interpret zero new tokens", json!({"max_new_tokens": 0}), StatusCode::BAD_REQUEST, Some("max_new_tokens")),
        ("interpret threshold out of range", json!({"threshold": 2.0}), StatusCode::BAD_REQUEST, Some("threshold")),
        ("interpret context overflow", json!({"max_new_tokens": 500}), StatusCode::PAYLOAD_TOO_LARGE, Some("max_new_tokens")),
        ("interpret amplified overflow", json!({"alpha": 3.0e38, "kind": "hidden"}), StatusCode::UNPROCESSABLE_ENTITY, Some("alpha")),
    ];
    for (name, extra, status, field) in table {
        s.expect(name, &app0, "/api/interpret", Some(with(extra)), status, field).await;
    }
    let mut missing = base_req.clone();
    missing.as_object_mut().unwrap().remove("layer");
    s.expect("interpret missing layer", &app0, "/api/interpret", Some(missing), StatusCode::BAD_REQUEST, Some("layer")).await;
    let failing = app(bundle.clone(), Some(Arc::new(Failing)));
    s.expect(
        "interpret internal failure is structured",
        &failing,
        "/api/interpret",
        Some(with(json!({"reference": "x"}))),
        StatusCode::INTERNAL_SERVER_ERROR,
        None,
    )
    .await;

    // sweep
    let sweep_req = |extra: Value| {
        let mut v = json!({"prompt": diana, "position": wales, "kind": "mlp", "layer": 1, "reference": "zz unmatched reference"});
        for (k, x) in extra.as_object().unwrap() {
            v[k] = x.clone();
        }
        v
    };
    let body = s.expect("sweep single alpha", &app0, "/api/sweep", Some(sweep_req(json!({"alphas": [6]}))), StatusCode::OK, None).await;
    s.record("single-alpha sweep echoes alpha", ensure(body["best_alpha"] == 6.0, || format!("{body}")));
    let body = s.expect("sweep tie", &app0, "/api/sweep", Some(sweep_req(json!({"alphas": [3, 9, 12]}))), StatusCode::OK, None).await;
    s.record("tied sweep picks smallest alpha", ensure(body["best_alpha"] == 3.0, || format!("{body}")));
    let host = app(bundle.clone(), None);
    let entry = &superscopes_core::harness::starter_corpus()[0];
    let body = s
        .expect(
            "sweep default grid, host scorer",
            &host,
            "/api/sweep",
            Some(json!({"prompt": entry.source_prompt, "position": wales, "kind": "mlp", "layer": 2, "reference": entry.reference})),
            StatusCode::OK,
            None,
        )
        .await;
    let r = (|| {
        let results = body["results"].as_array().ok_or_else(|| "no results".to_string())?;
        let alphas: Vec<f64> = results.iter().map(|r| r["alpha"].as_f64().unwrap()).collect();
        ensure(alphas == [1.0, 3.0, 6.0, 9.0, 12.0, 15.0], || format!("{alphas:?}"))?;
        let best = body["best_alpha"].as_f64().unwrap();
        let best_score = results.iter().find(|r| r["alpha"] == best).unwrap()["score"].as_f64().unwrap();
        let first = results.iter().find(|r| r["score"].as_f64().unwrap() == best_score).unwrap();
        ensure(results.iter().all(|r| r["score"].as_f64().unwrap() <= best_score) && first["alpha"] == best, || {
            format!("{body}")
        })
    })();
    s.record("default sweep covers grid and picks argmax", r);
    for (name, extra, field) in [
        ("sweep descending alphas", json!({"alphas": [3, 1]}), "alphas"),
        ("sweep empty alphas", json!({"alphas": []}), "alphas"),
        ("sweep non-positive alpha", json!({"alphas": [0, 1]}), "alphas"),
        ("sweep empty reference", json!({"reference": ""}), "reference"),
        ("sweep bad threshold", json!({"threshold": 0}), "threshold"),
    ] {
        s.expect(name, &app0, "/api/sweep", Some(sweep_req(extra)), StatusCode::BAD_REQUEST, Some(field)).await;
    }
    s.expect("sweep layer > L", &app0, "/api/sweep", Some(sweep_req(json!({"layer": 9}))), StatusCode::UNPROCESSABLE_ENTITY, Some("layer"))
        .await;

    // contextualize
    let always = |v: f32| -> ScorerHandle { Arc::new(FnScorer(move |_: &str, _: &str| v)) };
    let ctx = json!({"prompt": diana, "position": wales, "reference": "British princess"});
    let body = s.expect("contextualize always 1", &app(bundle.clone(), Some(always(1.0))), "/api/contextualize", Some(ctx.clone()), StatusCode::OK, None).await;
    s.record(
        "always-1 scorer gives layer_c = 1 with L rows",
        ensure(body["layer_c"] == 1 && body["per_layer"].as_array().map(|a| a.len()) == Some(n_layers), || format!("{body}")),
    );
    let body = s.expect("contextualize always 0", &app(bundle.clone(), Some(always(0.0))), "/api/contextualize", Some(ctx.clone()), StatusCode::OK, None).await;
    s.record(
        "always-0 scorer gives no layer_c",
        ensure(body["layer_c"].is_null() && body["per_layer"].as_array().map(|a| a.len()) == Some(n_layers), || format!("{body}")),
    );
    let mut bad = ctx.clone();
    bad["position"] = json!(99);
    s.expect("contextualize position > n", &app0, "/api/contextualize", Some(bad), StatusCode::UNPROCESSABLE_ENTITY, Some("position")).await;
    let mut bad = ctx.clone();
    bad["threshold"] = json!(1.0);
    s.expect("contextualize bad threshold", &app0, "/api/contextualize", Some(bad), StatusCode::BAD_REQUEST, Some("threshold")).await;
    let mut bad = ctx.clone();
    bad["reference"] = json!("");
    s.expect("contextualize empty reference", &app0, "/api/contextualize", Some(bad), StatusCode::BAD_REQUEST, Some("reference")).await;

    // unknown route
    let (st, v) = get(&app0, "/api/nope").await;
    let r = ensure(st == StatusCode::NOT_FOUND, || format!("{st}")).and_then(|_| validate_ref(&s.doc, "#/components/schemas/Error", &v));
    s.record("unknown route is a structured 404", r);

    // statelessness and concurrency
    let script: Vec<(&str, Value)> = vec![
        ("/api/tokenize", json!({"prompt": diana})),
        ("/api/interpret", with(json!({"reference": "royal"}))),
        ("/api/sweep", sweep_req(json!({"alphas": [1, 9]}))),
        ("/api/contextualize", ctx.clone()),
    ];
    let mut forward = Vec::new();
    for (p, b) in &script {
        forward.push(post(&host, p, b.clone()).await);
    }
    let mut backward = Vec::new();
    for (p, b) in script.iter().rev() {
        backward.push(post(&host, p, b.clone()).await);
    }
    backward.reverse();
    s.record("request order does not change responses", ensure(forward == backward, || "responses differ".into()));
    let mut bodies = Vec::new();
    for _ in 0..8 {
        let (h, b) = (host.clone(), sweep_req(json!({"alphas": [1, 3, 6]})));
        bodies.push(tokio::spawn(async move { post(&h, "/api/sweep", b).await }));
    }
    let mut out = Vec::new();
    for b in bodies {
        out.push(b.await.unwrap());
    }
    s.record(
        "concurrent identical requests agree",
        ensure(out.iter().all(|b| b == &out[0]) && out[0].0 == StatusCode::OK, || "bodies differ".into()),
    );

    s.checks
}
