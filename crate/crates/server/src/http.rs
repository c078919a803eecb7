//! JSON-over-HTTP review service: suggestions, explanations, a review queue of
//! disagreement cases and an append-only adjudication log.
//!
//! Every response body is a JSON object carrying `schema_version`. Errors use
//! `{schema_version, error: {kind, message}}`.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use medcode::analysis::{mine_disagreements, read_adjudications, Adjudication, AnalysisError, Decision};
use medcode::codesystem::{Code, CodeRange, CodeSystem};
use medcode::corpusgen::PatientCourse;
use medcode::explain::{explain_text, AttributionMap, ExplainError};
use medcode::metrics::rank_codes;
use medcode::model::{Checkpoint, ModelError};
use medcode::pipeline::assemble_document;
use medcode::textprep::tokenize;
use medcode::workflow::{predictions, WorkflowError};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_BOUNDARY: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("a review queue needs a loaded model")]
    QueueWithoutModel,
    #[error("duplicate patient id {0} in the session corpus")]
    DuplicatePatient(String),
}

/// Everything the service needs at startup.
pub struct ServerConfig {
    pub checkpoint: Option<Checkpoint>,
    pub code_system: Option<CodeSystem>,
    /// Patients available to the review queue and to adjudication.
    pub corpus: Vec<PatientCourse>,
    /// Ranges mined for the queue; empty mines every code of the model separately.
    pub queue_ranges: Vec<CodeRange>,
    pub boundary: f64,
    pub log_path: PathBuf,
}

struct LoadedModel {
    checkpoint: Checkpoint,
    hash: String,
}

#[derive(Debug, Clone, Serialize)]
struct QueueEntry {
    patient_id: String,
    code: Code,
    confidence: f64,
}

struct Log {
    file: File,
    /// (patient, code, reviewer) triples with at least one decision.
    decided: HashSet<(String, Code, String)>,
}

pub struct AppState {
    model: Option<LoadedModel>,
    code_system: Option<CodeSystem>,
    code_system_hash: Option<String>,
    patients: HashMap<String, PatientCourse>,
    confidences: HashMap<String, Vec<f64>>,
    queue: Vec<QueueEntry>,
    log: Mutex<Log>,
    log_path: PathBuf,
}

fn open_log(path: &Path) -> Result<File, ServerError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| ServerError::Io {
            path: path.to_path_buf(),
            source,
        })
}

impl AppState {
    pub fn new(cfg: ServerConfig) -> Result<Self, ServerError> {
        let model = cfg.checkpoint.map(|checkpoint| LoadedModel {
            hash: checkpoint.content_hash(),
            checkpoint,
        });
        let mut patients = HashMap::new();
        for p in &cfg.corpus {
            if patients.insert(p.id.clone(), p.clone()).is_some() {
                return Err(ServerError::DuplicatePatient(p.id.clone()));
            }
        }
        let mut confidences = HashMap::new();
        let mut queue = Vec::new();
        if let Some(m) = &model {
            if !cfg.corpus.is_empty() {
                let ck = &m.checkpoint;
                let set = predictions(ck, &cfg.corpus)?;
                let ids: Vec<String> = cfg.corpus.iter().map(|p| p.id.clone()).collect();
                let ranges = if cfg.queue_ranges.is_empty() {
                    ck.labels.codes().iter().map(CodeRange::single).collect()
                } else {
                    cfg.queue_ranges.clone()
                };
                for range in &ranges {
                    for case in mine_disagreements(&set, &ids, &ck.labels, range, cfg.boundary)? {
                        queue.push(QueueEntry {
                            patient_id: case.patient_id,
                            code: case.code,
                            confidence: case.confidence,
                        });
                    }
                }
                queue.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                for (id, ex) in ids.into_iter().zip(set.examples) {
                    confidences.insert(id, ex.confidences);
                }
            }
        } else if !cfg.queue_ranges.is_empty() {
            return Err(ServerError::QueueWithoutModel);
        }
        let decided = read_adjudications(&cfg.log_path)?
            .into_iter()
            .map(|a| (a.patient_id, a.code, a.reviewer))
            .collect();
        let file = open_log(&cfg.log_path)?;
        Ok(AppState {
            model,
            code_system_hash: cfg.code_system.as_ref().map(CodeSystem::content_hash),
            code_system: cfg.code_system,
            patients,
            confidences,
            queue,
            log: Mutex::new(Log { file, decided }),
            log_path: cfg.log_path,
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    fn model(&self) -> Result<&LoadedModel, ApiError> {
        self.model.as_ref().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no checkpoint is loaded")
        })
    }

    fn description(&self, code: &Code) -> String {
        self.code_system
            .as_ref()
            .and_then(|cs| cs.description(code))
            .unwrap_or_default()
            .to_string()
    }

    fn suggestions(&self, ck: &Checkpoint, confidences: &[f64], top_k: usize) -> Vec<Suggestion> {
        rank_codes(confidences)
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, c)| {
                let code = ck.labels.code(c).clone();
                Suggestion {
                    description: self.description(&code),
                    confidence: confidences[c],
                    rank: i + 1,
                    attribution: AttributionHandle {
                        path: "/explain".into(),
                        code: code.clone(),
                    },
                    code,
                }
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, kind, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": {"kind": self.kind, "message": self.message},
        });
        (self.status, Json(body)).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::AllPadDocument => ApiError::bad_request("empty_text", "text has no tokens"),
            other => ApiError::internal(other.to_string()),
        }
    }
}

/// Wraps a payload with the schema version.
#[derive(Debug, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: T,
}

fn versioned<T: Serialize>(body: T) -> Json<Versioned<T>> {
    Json(Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    })
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed_request", e.to_string()))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionHandle {
    pub path: String,
    pub code: Code,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub code: Code,
    pub description: String,
    pub confidence: f64,
    pub rank: usize,
    /// Where to fetch the token attributions for this code.
    pub attribution: AttributionHandle,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    text: String,
    #[serde(default = "default_top_k")]
    top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub checkpoint_hash: String,
    pub suggestions: Vec<Suggestion>,
}

fn require_text(text: &str) -> Result<(), ApiError> {
    if text.trim().is_empty() {
        return Err(ApiError::bad_request("empty_text", "text must be non-empty"));
    }
    Ok(())
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: PredictRequest = parse_body(&body)?;
    state.model()?;
    require_text(&req.text)?;
    if req.top_k == 0 {
        return Err(ApiError::bad_request("invalid_top_k", "top_k must be at least 1"));
    }
    let resp = blocking(move || {
        let m = state.model()?;
        let ck = &m.checkpoint;
        let doc = tokenize(&req.text, &ck.vocabulary, ck.tokenizer);
        let confidences = ck.model.confidences(&doc)?;
        Ok(PredictResponse {
            checkpoint_hash: m.hash.clone(),
            suggestions: state.suggestions(ck, &confidences, req.top_k),
        })
    })
    .await?;
    Ok(versioned(resp).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    text: String,
    code: String,
}

async fn explain(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ExplainRequest = parse_body(&body)?;
    state.model()?;
    require_text(&req.text)?;
    let code = Code::parse(&req.code).map_err(|e| ApiError::bad_request("unknown_code", e.to_string()))?;
    let map: AttributionMap = blocking(move || {
        let ck = &state.model()?.checkpoint;
        explain_text(ck, &req.text, &code).map_err(|e| match e {
            ExplainError::UnknownCode(c) => {
                ApiError::bad_request("unknown_code", format!("code {c} is not in the model's label space"))
            }
            ExplainError::Model(m) => m.into(),
        })
    })
    .await?;
    Ok(versioned(map).into_response())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    reviewer: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewCase {
    pub patient_id: String,
    pub code: Code,
    pub description: String,
    pub confidence: f64,
    pub specialty: String,
    pub text: String,
    pub recorded_codes: Vec<Code>,
    pub suggestions: Vec<Suggestion>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextResponse {
    /// Queue entries not yet decided, including the returned one.
    pub remaining: usize,
    pub case: Option<ReviewCase>,
}

/// The most confident queued case without a decision from `reviewer` (or
/// from anyone, when no reviewer is given).
async fn cases_next(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let m = state.model()?;
    let pending: Vec<&QueueEntry> = {
        let log = state.log.lock().map_err(|_| ApiError::internal("log lock poisoned"))?;
        state
            .queue
            .iter()
            .filter(|e| {
                !log.decided.iter().any(|(p, c, r)| {
                    p == &e.patient_id && c == &e.code && q.reviewer.as_ref().is_none_or(|rev| rev == r)
                })
            })
            .collect()
    };
    let case = pending.first().map(|e| {
        let patient = &state.patients[&e.patient_id];
        let confidences = &state.confidences[&e.patient_id];
        ReviewCase {
            patient_id: e.patient_id.clone(),
            code: e.code.clone(),
            description: state.description(&e.code),
            confidence: e.confidence,
            specialty: patient.specialty.clone(),
            text: assemble_document(patient).text,
            recorded_codes: patient.recorded_codes.clone(),
            suggestions: state.suggestions(&m.checkpoint, confidences, DEFAULT_TOP_K),
        }
    });
    Ok(versioned(NextResponse {
        remaining: pending.len(),
        case,
    })
    .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjudicateRequest {
    patient_id: String,
    code: String,
    decision: Decision,
    reviewer: String,
    #[serde(default)]
    confidence: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdjudicateResponse {
    pub status: String,
    pub adjudication: Adjudication,
}

async fn adjudicate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let malformed = |msg: String| ApiError::new(StatusCode::CONFLICT, "malformed_decision", msg);
    let req: AdjudicateRequest = serde_json::from_slice(&body).map_err(|e| malformed(e.to_string()))?;
    if req.reviewer.trim().is_empty() {
        return Err(malformed("reviewer must be non-empty".into()));
    }
    let code = Code::parse(&req.code).map_err(|e| malformed(e.to_string()))?;
    if let Some(cs) = &state.code_system {
        if !cs.contains(&code) {
            return Err(malformed(format!("code {code} is not in the code system")));
        }
    }
    if let Some(c) = req.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Err(malformed("confidence must lie in [0, 1]".into()));
        }
    }
    if !state.patients.contains_key(&req.patient_id) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_patient",
            format!("patient {} is not in the loaded corpus", req.patient_id),
        ));
    }
    let model_confidence = state.model.as_ref().and_then(|m| {
        let idx = m.checkpoint.labels.index_of(&code)?;
        state.confidences.get(&req.patient_id).map(|c| c[idx])
    });
    let row = Adjudication {
        patient_id: req.patient_id,
        code,
        decision: req.decision,
        reviewer: req.reviewer,
        timestamp: chrono::Utc::now().to_rfc3339(),
        confidence: req.confidence.or(model_confidence),
    };
    let mut line = serde_json::to_string(&row).map_err(|e| ApiError::internal(e.to_string()))?;
    line.push('\n');
    {
        let mut log = state.log.lock().map_err(|_| ApiError::internal("log lock poisoned"))?;
        log.file
            .write_all(line.as_bytes())
            .and_then(|_| log.file.sync_data())
            .map_err(|e| ApiError::internal(format!("writing adjudication log: {e}")))?;
        log.decided
            .insert((row.patient_id.clone(), row.code.clone(), row.reviewer.clone()));
    }
    Ok(versioned(AdjudicateResponse {
        status: "recorded".into(),
        adjudication: row,
    })
    .into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "model_loaded": state.model.is_some(),
        "checkpoint_hash": state.model.as_ref().map(|m| m.hash.clone()),
        "code_system_hash": state.code_system_hash,
        "label_count": state.model.as_ref().map(|m| m.checkpoint.labels.len()),
        "patients": state.patients.len(),
        "queue_length": state.queue.len(),
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/explain", post(explain))
        .route("/cases/next", get(cases_next))
        .route("/adjudicate", post(adjudicate))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
