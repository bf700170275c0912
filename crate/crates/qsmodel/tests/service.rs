use std::fs;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use qsmodel::config::{builtin_calibration, builtin_hardware, write_model_spec, builtin_model};
use qsmodel::service::{router, AppState};

fn app() -> axum::Router {
    router(AppState::load(None, builtin_calibration(), builtin_hardware()).unwrap())
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, text) = call(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_str(&text).unwrap_or(Value::String(text)))
}

fn cli_json(args: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.json");
    let mut argv = vec!["qsmodel"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--format", "json", "--out", out.to_str().unwrap()]);
    assert_eq!(qsmodel::cli::run(argv), 0);
    serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap()
}

#[tokio::test]
async fn health_reports_version_and_calibration() {
    let (s, text) = call(&app(), "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["calibration_id"], builtin_calibration().id);
}

#[tokio::test]
async fn models_listing() {
    let (s, text) = call(&app(), "GET", "/api/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_str(&text).unwrap();
    let ds = v.as_array().unwrap().iter().find(|m| m["id"] == "deepseek-v3").unwrap();
    assert_eq!(ds["s"], 0.03125);
    assert_eq!(ds["num_experts"], 256);
    assert_eq!(ds["kv_layout"], "mla");
}

#[tokio::test]
async fn model_dir_listing_is_degraded_not_failed() {
    let empty = tempfile::tempdir().unwrap();
    let app = router(AppState::load(Some(empty.path()), builtin_calibration(), builtin_hardware()).unwrap());
    let (s, text) = call(&app, "GET", "/api/models", None).await;
    assert_eq!((s, text.as_str()), (StatusCode::OK, "[]"));

    let dir = tempfile::tempdir().unwrap();
    write_model_spec(&dir.path().join("g.json"), "grok-1", &builtin_model("grok-1").unwrap()).unwrap();
    fs::write(dir.path().join("broken.json"), "{}").unwrap();
    let app = router(AppState::load(Some(dir.path()), builtin_calibration(), builtin_hardware()).unwrap());
    let (_, text) = call(&app, "GET", "/api/models", None).await;
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn evaluate_reference_operating_point() {
    let plan = json!({"tp": 8, "ep": 8, "pp": 1, "kv_mode": "kvp", "kv_degree": 8, "dp": 1});
    let (s, v) = post(&app(), "/api/evaluate", json!({"model": "deepseek-v3", "context_length": 131072, "plan": plan})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["feasible"], true);
    for key in ["memory", "reuse", "latency", "throughput"] {
        assert!(v[key].is_object(), "{key} missing");
    }
    assert_eq!(v["calibration_id"], builtin_calibration().id);
}

#[tokio::test]
async fn evaluate_switch_c_is_infeasible() {
    let plan = json!({"tp": 8, "ep": 8, "pp": 1, "kv_mode": "kvp", "kv_degree": 8, "dp": 1});
    let (s, v) = post(&app(), "/api/evaluate", json!({"model": "switch-c-2048", "context_length": 131072, "plan": plan})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["feasible"], false, "Switch-C fits under the shipped calibration: {}", v["memory"]);
}

#[tokio::test]
async fn evaluate_infeasible_point_returns_reasons() {
    let plan = json!({"tp": 1, "ep": 1, "pp": 1, "kv_mode": "none", "kv_degree": 1, "dp": 1});
    let body = json!({"model": "deepseek-v3", "context_length": 131072, "plan": plan, "cluster": {"num_gpus": 1}});
    let (s, v) = post(&app(), "/api/evaluate", body).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["feasible"], false);
    assert!(v["reason"].as_str().unwrap().starts_with("OOM"));
}

#[tokio::test]
async fn dense_self_comparison_has_unit_speedup() {
    let (s, v) = post(&app(), "/api/evaluate", json!({"model": "llama-2-70b", "context_length": 8192, "q": 1.0, "cluster": {"num_gpus": 8}})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["dense"]["speedup"], 1.0);
}

#[tokio::test]
async fn schema_violations_are_400_with_field() {
    let app = app();
    let (s, v) = post(&app, "/api/evaluate", json!({"model": "grok-1", "context_length": "long"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "context_length");

    let (s, v) = post(&app, "/api/evaluate", json!({"model": "grok-1", "context_length": 1024, "plan": {"tp": 8}})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "plan");

    let (s, v) = post(&app, "/api/evaluate", json!({"model": "grok-1", "context_length": 1024, "colour": 1})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("colour"));

    let spec = serde_json::to_value(builtin_model("grok-1").unwrap()).unwrap();
    let (s, v) = post(&app, "/api/evaluate", json!({"model": "grok-1", "model_spec": spec, "context_length": 1024})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("model")));
    let (s, _) = post(&app, "/api/evaluate", json!({"context_length": 1024})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = post(&app, "/api/evaluate", json!({"model": "grok-1", "context_length": 1024, "calibration": "other"})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("calibration")));

    let (s, v) = post(&app, "/api/sweep", json!({"model": "grok-1", "contexts": [4096, 1024]})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("contexts")));
}

#[tokio::test]
async fn inline_model_spec_is_accepted() {
    let spec = serde_json::to_value(builtin_model("grok-1").unwrap()).unwrap();
    let by_spec = post(&app(), "/api/evaluate", json!({"model_spec": spec, "context_length": 32768})).await;
    let by_id = post(&app(), "/api/evaluate", json!({"model": "grok-1", "context_length": 32768})).await;
    assert_eq!(by_spec, by_id);
}

#[tokio::test]
async fn sweep_streams_one_row_per_context() {
    let (s, text) = call(&app(), "POST", "/api/sweep", Some(json!({"model": "deepseek-v3"}))).await;
    assert_eq!(s, StatusCode::OK);
    let events: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 8);
    assert!(events[..7].iter().all(|e| e["event"] == "row"));
    assert_eq!(events[7]["event"], "done");

    // Streamed rows equal the batch result and the CLI output.
    let cli = cli_json(&["sweep", "--model", "deepseek-v3"]);
    let rows: Vec<&Value> = events[..7].iter().map(|e| &e["row"]).collect();
    assert_eq!(rows, cli["rows"].as_array().unwrap().iter().collect::<Vec<_>>());
    let (_, batch) = post(&app(), "/api/sweep?stream=false", json!({"model": "deepseek-v3"})).await;
    assert_eq!(batch, cli);
}

#[tokio::test]
async fn autotune_on_one_gpu_is_the_singleton() {
    let (s, v) = post(&app(), "/api/autotune", json!({"model": "llama-2-70b", "context_length": 1024, "cluster": {"num_gpus": 1}})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ranking"].as_array().unwrap().len(), 1);
    assert_eq!(v["best"]["plan"], json!({"tp": 1, "ep": 1, "pp": 1, "kv_mode": "none", "kv_degree": 1, "dp": 1}));
}

#[tokio::test]
async fn pair_q_sweep_matches_cli() {
    let (s, v) = post(&app(), "/api/pair", json!({"model": "grok-1", "q": [5, 3, 2]})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v, cli_json(&["pair", "--model", "grok-1", "--q", "5,3,2"]));
}

#[tokio::test]
async fn autotune_matches_cli() {
    let (_, v) = post(&app(), "/api/autotune", json!({"model": "qwen3-235b-a22b", "context_length": 65536, "cluster": {"num_gpus": 16}})).await;
    assert_eq!(v, cli_json(&["autotune", "--model", "qwen3-235b-a22b", "--context", "65536", "--gpus", "16"]));
}

#[tokio::test]
async fn responses_do_not_depend_on_request_order() {
    let app = app();
    let a = json!({"model": "grok-1", "context_length": 131072, "q": 3.0});
    let first = post(&app, "/api/evaluate", a.clone()).await;
    post(&app, "/api/pair", json!({"model": "deepseek-v3", "q": 2})).await;
    post(&app, "/api/autotune", json!({"model": "qwen3-235b-a22b", "context_length": 1024})).await;
    assert_eq!(post(&app, "/api/evaluate", a).await, first);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/api/evaluate")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
