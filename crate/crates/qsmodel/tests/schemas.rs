use std::fs;
use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use qsmodel::config::{builtin_calibration, builtin_hardware};
use qsmodel::schema;
use qsmodel::service::{router, AppState};

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn load(stem: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(schema_dir().join(format!("{stem}.schema.json"))).unwrap()).unwrap()
}

fn assert_valid(stem: &str, instance: &Value) {
    let validator = jsonschema::validator_for(&load(stem)).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{stem}: {errors:?}");
}

fn config(rel: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(rel)).unwrap()).unwrap()
}

#[test]
fn published_schemas_are_current() {
    let all = schema::all();
    let on_disk = fs::read_dir(schema_dir()).unwrap().count();
    assert_eq!(on_disk, all.len(), "stale files in schemas/");
    for (stem, s) in all {
        let path = schema_dir().join(format!("{stem}.schema.json"));
        let text = fs::read_to_string(&path).unwrap_or_default();
        assert_eq!(text, schema::render(&s), "{} is stale; run `qsmodel schema --dir schemas`", path.display());
    }
}

#[test]
fn shipped_configs_validate() {
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/models")).unwrap() {
        let path = entry.unwrap().path();
        assert_valid("model", &serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap());
    }
    assert_valid("hardware", &config("hardware/reference-180gb.json"));
    assert_valid("calibration", &config("calibration/default.json"));

    let mut bad = config("models/grok-1.json");
    bad["model"]["kv_layout"]["kind"] = json!("paged");
    assert!(!jsonschema::is_valid(&load("model"), &bad));
}

async fn call(uri: &str, body: Option<Value>) -> String {
    let app = router(AppState::load(None, builtin_calibration(), builtin_hardware()).unwrap());
    let req = Request::builder()
        .method(if body.is_some() { "POST" } else { "GET" })
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let bytes = app.oneshot(req).await.unwrap().into_body().collect().await.unwrap().to_bytes();
    String::from_utf8(bytes.to_vec()).unwrap()
}

#[tokio::test]
async fn service_payloads_match_their_schemas() {
    let parse = |t: String| serde_json::from_str::<Value>(&t).unwrap();
    assert_valid("health-response", &parse(call("/api/health", None).await));
    assert_valid("models-response", &parse(call("/api/models", None).await));

    let evaluate = json!({"model": "grok-1", "context_length": 131072, "q": 3.0});
    assert_valid("evaluate-request", &evaluate);
    assert_valid("evaluate-response", &parse(call("/api/evaluate", Some(evaluate)).await));
    let infeasible = json!({"model": "deepseek-v3", "context_length": 131072, "cluster": {"num_gpus": 1}});
    assert_valid("evaluate-response", &parse(call("/api/evaluate", Some(infeasible)).await));
    assert_valid("error-response", &parse(call("/api/evaluate", Some(json!({"model": 3}))).await));

    let pair = json!({"model": "grok-1", "q": [5, 3]});
    assert_valid("pair-request", &pair);
    assert_valid("pair-response", &parse(call("/api/pair", Some(pair)).await));

    let sweep = json!({"model": "qwen3-235b-a22b", "contexts": [1024, 131072]});
    assert_valid("sweep-request", &sweep);
    for line in call("/api/sweep", Some(sweep.clone())).await.lines() {
        assert_valid("sweep-event", &serde_json::from_str(line).unwrap());
    }
    assert_valid("sweep-response", &parse(call("/api/sweep?stream=false", Some(sweep)).await));

    let tune = json!({"model": "llama-2-70b", "context_length": 4096, "cluster": {"num_gpus": 8}});
    assert_valid("autotune-request", &tune);
    assert_valid("autotune-response", &parse(call("/api/autotune", Some(tune)).await));
}
