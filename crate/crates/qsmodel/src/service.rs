//! HTTP JSON planner service.
//!
//! Stateless: every handler is a pure function of the request and the
//! configuration loaded at startup. Bodies are parsed with path-aware errors
//! so a 400 names the offending field.

use std::convert::Infallible;
use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use qsmodel_core::autotune::{PlanReport, SearchSpace};
use qsmodel_core::qs::{synthesize_dense_baseline, DEFAULT_Q};
use qsmodel_core::report::{check_contexts, sweep_anchor, sweep_point, sweep_row, PlanChoice, SweepAnchor, SweepPoint, SweepRow};
use qsmodel_core::specs::{ClusterSpec, HardwareSpec, ModelSpec, ParallelismPlan};
use qsmodel_core::Calibration;

use crate::config::{builtin_model_files, from_json_str, load_model_dir, ConfigError};
use crate::eval::{self, DefaultPlan, ModelSummary};

#[derive(Debug, Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    models: Vec<(String, ModelSpec)>,
    calibration: Calibration,
    hardware: HardwareSpec,
}

impl AppState {
    /// Models come from `model_dir` when given (bad files are skipped with a
    /// warning), otherwise from the built-ins.
    pub fn load(model_dir: Option<&Path>, calibration: Calibration, hardware: HardwareSpec) -> Result<Self, ConfigError> {
        let files = match model_dir {
            Some(dir) => {
                let (ok, bad) = load_model_dir(dir)?;
                for e in bad {
                    log::warn!("skipping model config: {e}");
                }
                ok
            }
            None => builtin_model_files(),
        };
        let models = files.into_iter().map(|f| (f.id, f.model)).collect();
        Ok(AppState { inner: Arc::new(Inner { models, calibration, hardware }) })
    }

    pub fn calibration(&self) -> &Calibration {
        &self.inner.calibration
    }
}

#[derive(Debug, Serialize, JsonSchema)]
struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

impl ApiError {
    fn bad(field: Option<&str>, message: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, error: message.into(), field: field.map(str::to_string) }
    }
}

impl From<qsmodel_core::Error> for ApiError {
    fn from(e: qsmodel_core::Error) -> Self {
        let field = match &e {
            qsmodel_core::Error::Invalid { field, .. } => Some(*field),
            qsmodel_core::Error::PlanMismatch { .. } => Some("plan"),
            _ => None,
        };
        ApiError::bad(field, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad(None, "request body is not UTF-8"))?;
    from_json_str(text, "request").map_err(|e| match e {
        ConfigError::Schema { field, message, .. } => ApiError::bad(Some(&field), message),
        other => ApiError::bad(None, other.to_string()),
    })
}

/// Hardware and size overrides on top of the served reference cluster.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ClusterOverrides {
    pub num_gpus: Option<u32>,
    pub hbm_capacity_bytes: Option<f64>,
    pub hbm_bandwidth: Option<f64>,
}

/// A model by built-in id or inline spec; exactly one must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub model: Option<String>,
    pub model_spec: Option<ModelSpec>,
    #[serde(default)]
    pub cluster: ClusterOverrides,
    pub context_length: u64,
    /// When set, the dense-q baseline is evaluated alongside.
    pub q: Option<f64>,
    /// Explicit plan; autotuned when absent.
    pub plan: Option<ParallelismPlan>,
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DenseComparison {
    pub model: String,
    pub report: PlanReport,
    /// Dense tokens/s over MoE tokens/s.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvaluateResponse {
    #[serde(flatten)]
    pub report: PlanReport,
    pub calibration_id: String,
    pub dense: Option<DenseComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn values(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(q) => vec![*q],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PairRequest {
    pub model: Option<String>,
    pub model_spec: Option<ModelSpec>,
    #[serde(default)]
    pub cluster: ClusterOverrides,
    #[serde(default = "default_context")]
    pub context_length: u64,
    /// One q or a list; one row each.
    pub q: Option<OneOrMany>,
    /// Fixed plan; the reference plan when absent.
    pub plan: Option<ParallelismPlan>,
    #[serde(default)]
    pub autotune: bool,
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub model: Option<String>,
    pub model_spec: Option<ModelSpec>,
    #[serde(default)]
    pub cluster: ClusterOverrides,
    pub q: Option<f64>,
    pub contexts: Option<Vec<u64>>,
    /// Fixed plan; autotuned per point when absent.
    pub plan: Option<ParallelismPlan>,
    pub calibration: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AutotuneRequest {
    pub model: Option<String>,
    pub model_spec: Option<ModelSpec>,
    #[serde(default)]
    pub cluster: ClusterOverrides,
    #[serde(default = "default_context")]
    pub context_length: u64,
    pub space: Option<SearchSpace>,
    pub calibration: Option<String>,
}

fn default_context() -> u64 {
    eval::DEFAULT_CONTEXT
}

/// One NDJSON line of a streamed sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[allow(clippy::large_enum_variant)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SweepEvent {
    Row { index: usize, row: SweepRow, point: SweepPoint },
    Done { anchor: Option<SweepAnchor>, rows: usize },
    Error { message: String },
}

impl AppState {
    fn model(&self, id: &Option<String>, spec: &Option<ModelSpec>) -> ApiResult<ModelSpec> {
        match (id, spec) {
            (Some(_), Some(_)) | (None, None) => Err(ApiError::bad(Some("model"), "give exactly one of `model` and `model_spec`")),
            (Some(id), None) => self.inner.models.iter().find(|(k, _)| k == id).map(|(_, m)| m.clone()).ok_or_else(|| {
                let known: Vec<&str> = self.inner.models.iter().map(|(k, _)| k.as_str()).collect();
                ApiError::bad(Some("model"), format!("unknown model `{id}` (known: {})", known.join(", ")))
            }),
            (None, Some(m)) => {
                m.validate().map_err(|e| ApiError::bad(Some("model_spec"), e.to_string()))?;
                Ok(m.clone())
            }
        }
    }

    fn check_calibration(&self, id: &Option<String>) -> ApiResult<()> {
        match id {
            Some(id) if *id != self.inner.calibration.id => Err(ApiError::bad(
                Some("calibration"),
                format!("calibration `{id}` is not loaded (serving `{}`)", self.inner.calibration.id),
            )),
            _ => Ok(()),
        }
    }

    fn cluster(&self, o: &ClusterOverrides) -> ApiResult<ClusterSpec> {
        let mut hw = self.inner.hardware.clone();
        if let Some(c) = o.hbm_capacity_bytes {
            hw.hbm_capacity_bytes = c;
        }
        if let Some(b) = o.hbm_bandwidth {
            hw.hbm_bandwidth = b;
        }
        hw.validate().map_err(|e| ApiError::bad(Some("cluster"), e.to_string()))?;
        eval::cluster(&hw, o.num_gpus.unwrap_or(eval::DEFAULT_GPUS), &self.inner.calibration)
            .map_err(|e| ApiError::bad(Some("cluster"), e.to_string()))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        error: format!("evaluation task failed: {e}"),
        field: None,
    })?
}

#[derive(Debug, Serialize, JsonSchema)]
struct Health {
    status: &'static str,
    version: &'static str,
    calibration_id: String,
}

/// Request and response schemas of the HTTP API.
pub(crate) fn schemas() -> Vec<(&'static str, schemars::Schema)> {
    use schemars::schema_for;
    vec![
        ("health-response", schema_for!(Health)),
        ("error-response", schema_for!(ApiError)),
        ("evaluate-request", schema_for!(EvaluateRequest)),
        ("evaluate-response", schema_for!(EvaluateResponse)),
        ("pair-request", schema_for!(PairRequest)),
        ("sweep-request", schema_for!(SweepRequest)),
        ("sweep-event", schema_for!(SweepEvent)),
        ("autotune-request", schema_for!(AutotuneRequest)),
    ]
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok", version: env!("CARGO_PKG_VERSION"), calibration_id: s.inner.calibration.id.clone() })
}

async fn models(State(s): State<AppState>) -> Json<Vec<ModelSummary>> {
    Json(s.inner.models.iter().map(|(id, m)| eval::summarize(id, m)).collect())
}

/// Best plan of the default space, or the top-ranked infeasible report.
fn best_or_first(model: &ModelSpec, cluster: &ClusterSpec, context: u64, cal: &Calibration) -> ApiResult<PlanReport> {
    let r = eval::autotune_model(model, cluster, context, &SearchSpace::default(), cal)?;
    r.best.or_else(|| r.ranking.into_iter().next()).ok_or_else(|| ApiError::bad(Some("cluster"), "no plan to evaluate"))
}

fn evaluate_blocking(s: &AppState, req: EvaluateRequest) -> ApiResult<EvaluateResponse> {
    s.check_calibration(&req.calibration)?;
    let model = s.model(&req.model, &req.model_spec)?;
    let cluster = s.cluster(&req.cluster)?;
    let cal = &s.inner.calibration;
    let run = |m: &ModelSpec| match &req.plan {
        Some(p) => Ok(eval::feasible(m, p, &cluster, req.context_length, cal)?),
        None => best_or_first(m, &cluster, req.context_length, cal),
    };
    let report = run(&model)?;
    let dense = match req.q {
        Some(q) => {
            let d = synthesize_dense_baseline(&model, q)?;
            let dr = run(&d)?;
            let speedup = match (report.tokens_per_s(), dr.tokens_per_s()) {
                (Some(m), Some(d)) => Some(d / m),
                _ => None,
            };
            Some(DenseComparison { model: d.name, report: dr, speedup })
        }
        None => None,
    };
    Ok(EvaluateResponse { report, calibration_id: cal.id.clone(), dense })
}

async fn evaluate(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: EvaluateRequest = parse(&body)?;
    let out = blocking(move || evaluate_blocking(&s, req)).await?;
    Ok(Json(out).into_response())
}

async fn pair(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: PairRequest = parse(&body)?;
    let rows = blocking(move || {
        s.check_calibration(&req.calibration)?;
        let model = s.model(&req.model, &req.model_spec)?;
        let cluster = s.cluster(&req.cluster)?;
        let default = if req.autotune { DefaultPlan::Autotune } else { DefaultPlan::Reference };
        let choice = eval::plan_choice(req.plan, default, cluster.num_gpus);
        let qs = req.q.as_ref().map_or(vec![DEFAULT_Q], OneOrMany::values);
        Ok(eval::pair_rows(&[model], &qs, &cluster, req.context_length, &choice, &s.inner.calibration)?)
    })
    .await?;
    Ok(Json(rows).into_response())
}

async fn autotune(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: AutotuneRequest = parse(&body)?;
    let out = blocking(move || {
        s.check_calibration(&req.calibration)?;
        let model = s.model(&req.model, &req.model_spec)?;
        let cluster = s.cluster(&req.cluster)?;
        let space = req.space.unwrap_or_default();
        space.validate()?;
        Ok(eval::autotune_model(&model, &cluster, req.context_length, &space, &s.inner.calibration)?)
    })
    .await?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize, JsonSchema)]
struct SweepQuery {
    #[serde(default = "default_true")]
    stream: bool,
}

fn default_true() -> bool {
    true
}

struct SweepJob {
    moe: ModelSpec,
    dense: ModelSpec,
    q: f64,
    cluster: ClusterSpec,
    contexts: Vec<u64>,
    choice: PlanChoice,
}

fn sweep_job(s: &AppState, req: SweepRequest) -> ApiResult<SweepJob> {
    s.check_calibration(&req.calibration)?;
    let moe = s.model(&req.model, &req.model_spec)?;
    let cluster = s.cluster(&req.cluster)?;
    let contexts = req.contexts.unwrap_or_else(|| eval::SWEEP_CONTEXTS.to_vec());
    check_contexts(&contexts).map_err(|e| ApiError::bad(Some("contexts"), e.to_string()))?;
    let q = req.q.unwrap_or(DEFAULT_Q);
    let dense = synthesize_dense_baseline(&moe, q)?;
    let choice = eval::plan_choice(req.plan, DefaultPlan::Autotune, cluster.num_gpus);
    Ok(SweepJob { moe, dense, q, cluster, contexts, choice })
}

fn ndjson_line(e: &SweepEvent) -> Bytes {
    let mut line = serde_json::to_vec(e).expect("events serialize");
    line.push(b'\n');
    Bytes::from(line)
}

/// Streams one NDJSON row per context (`?stream=false` returns the whole
/// result as one JSON document instead).
async fn sweep(State(s): State<AppState>, Query(query): Query<SweepQuery>, body: Bytes) -> ApiResult<Response> {
    let req: SweepRequest = parse(&body)?;
    let state = s.clone();
    let job = blocking(move || sweep_job(&state, req)).await?;
    if !query.stream {
        let out = blocking(move || Ok(eval::sweep(&job.moe, job.q, &job.cluster, &job.contexts, &job.choice, &s.inner.calibration)?)).await?;
        return Ok(Json(out).into_response());
    }
    let (tx, rx) = tokio::sync::mpsc::channel::<Bytes>(4);
    tokio::task::spawn_blocking(move || {
        let cal = &s.inner.calibration;
        let mut anchor: Option<SweepAnchor> = None;
        for (i, &l) in job.contexts.iter().enumerate() {
            let event = match sweep_point(&job.moe, &job.dense, &job.cluster, l, &job.choice, cal) {
                Ok(point) => {
                    if i == 0 {
                        anchor = sweep_anchor(&point);
                    }
                    SweepEvent::Row { index: i, row: sweep_row(anchor.as_ref(), &point), point }
                }
                Err(e) => {
                    let _ = tx.blocking_send(ndjson_line(&SweepEvent::Error { message: e.to_string() }));
                    return;
                }
            };
            if tx.blocking_send(ndjson_line(&event)).is_err() {
                return; // client went away
            }
        }
        let _ = tx.blocking_send(ndjson_line(&SweepEvent::Done { anchor, rows: job.contexts.len() }));
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx)) });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(models))
        .route("/api/evaluate", post(evaluate))
        .route("/api/pair", post(pair))
        .route("/api/sweep", post(sweep))
        .route("/api/autotune", post(autotune))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(addr: &str, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on http://{} (calibration {})", listener.local_addr()?, state.calibration().id);
    axum::serve(listener, router(state)).await
}
