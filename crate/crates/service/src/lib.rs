//! HTTP front end for the editor.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/checkpoints` | | `[{id, label, len, channels, steps}]` |
//! | POST | `/sessions` | `{checkpoint}` | `{session, checkpoint, len, channels, steps}` |
//! | GET | `/sessions/{id}` | | session metadata and the last constraints |
//! | POST | `/sessions/{id}/edit` | `{constraints, seed?, n?, trace?}` | the edit response |
//!
//! The edit reply is the same JSON document `tsedit edit` writes to
//! `edit.json` for the same checkpoint, constraints, seed and `n`. Errors are
//! `{"error": …}` objects, with a `path` into the request body for schema
//! violations (400). Out-of-range constraints give 422 and numeric failures
//! 500.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tsedit::checkpoint::Checkpoint;
use tsedit::constraints::ConstraintSet;
use tsedit::diffusion::NoiseSchedule;
use tsedit::edit::{run_edit, EditRequest};
use tsedit::guidance::GuidanceConfig;

/// Largest `n` accepted by one edit call.
pub const MAX_SERIES: usize = 64;

pub struct Model {
    pub id: String,
    pub checkpoint: Checkpoint,
    pub schedule: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub label: String,
    pub len: usize,
    pub channels: usize,
    pub steps: usize,
}

impl Model {
    pub fn new(id: impl Into<String>, checkpoint: Checkpoint) -> tsedit::Result<Self> {
        let schedule = checkpoint.schedule()?;
        Ok(Model {
            id: id.into(),
            checkpoint,
            schedule,
        })
    }

    pub fn info(&self) -> CheckpointInfo {
        let cfg = self.checkpoint.model.config();
        CheckpointInfo {
            id: self.id.clone(),
            label: self.checkpoint.label.clone(),
            len: cfg.len,
            channels: cfg.channels,
            steps: cfg.diffusion_steps,
        }
    }
}

/// A checkpoint id and the reason it could not be loaded.
pub type LoadFailure = (String, tsedit::Error);

/// Loads every `*.json` checkpoint in `dir`, keyed by file stem. Files that
/// fail to load are returned separately so the caller can report them.
pub fn load_models(dir: &Path) -> std::io::Result<(Vec<Model>, Vec<LoadFailure>)> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        match Checkpoint::load(&path).and_then(|ck| Model::new(id.clone(), ck)) {
            Ok(m) => models.push(m),
            Err(e) => failures.push((id, e)),
        }
    }
    Ok((models, failures))
}

struct Session {
    model: Arc<Model>,
    next_seed: u64,
    last_constraints: Option<ConstraintSet>,
}

pub struct AppState {
    models: BTreeMap<String, Arc<Model>>,
    sessions: Mutex<HashMap<u64, Arc<tokio::sync::Mutex<Session>>>>,
    next_session: AtomicU64,
    guidance: GuidanceConfig,
}

impl AppState {
    pub fn new(models: Vec<Model>, guidance: GuidanceConfig) -> Self {
        AppState {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            guidance,
        }
    }

    fn session(&self, id: u64) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }
}

/// Which browser origins may call the API.
#[derive(Clone, Debug, Default)]
pub enum Cors {
    #[default]
    AnyOrigin,
    Origins(Vec<HeaderValue>),
}

pub fn router(state: Arc<AppState>, cors: Cors) -> Router {
    let origin = match cors {
        Cors::AnyOrigin => AllowOrigin::from(Any),
        Cors::Origins(list) => AllowOrigin::list(list),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/checkpoints", get(list_checkpoints))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edit", post(edit))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    path: Option<String>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a str>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            path: None,
        }
    }
}

impl From<tsedit::Error> for ApiError {
    fn from(e: tsedit::Error) -> Self {
        use tsedit::Error as E;
        let status = match &e {
            E::OutOfRange { .. } | E::Constraint(_) | E::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.message,
            path: self.path.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: e.into_inner().to_string(),
            path: Some(path),
        }
    })
}

fn json_bytes(text: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> Json<Vec<CheckpointInfo>> {
    Json(state.models.values().map(|m| m.info()).collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    checkpoint: String,
}

#[derive(Serialize)]
struct SessionInfo {
    session: u64,
    checkpoint: String,
    len: usize,
    channels: usize,
    steps: usize,
    next_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_constraints: Option<ConstraintSet>,
}

impl SessionInfo {
    fn of(id: u64, s: &Session) -> Self {
        let info = s.model.info();
        SessionInfo {
            session: id,
            checkpoint: info.id,
            len: info.len,
            channels: info.channels,
            steps: info.steps,
            next_seed: s.next_seed,
            last_constraints: s.last_constraints.clone(),
        }
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionInfo>, ApiError> {
    let req: CreateSession = parse(&body)?;
    let model = state
        .models
        .get(&req.checkpoint)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no checkpoint `{}`", req.checkpoint)))?;
    let id = state.next_session.fetch_add(1, Ordering::Relaxed);
    let session = Session {
        model,
        next_seed: 0,
        last_constraints: None,
    };
    let info = SessionInfo::of(id, &session);
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(info))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Json<SessionInfo>, ApiError> {
    let session = state.session(id)?;
    let guard = session.lock().await;
    Ok(Json(SessionInfo::of(id, &guard)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    constraints: ConstraintSet,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    trace: bool,
}

async fn edit(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = state.session(id)?;
    let req: EditBody = parse(&body)?;
    let n = req.n.unwrap_or(1);
    if n == 0 || n > MAX_SERIES {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("n = {n} outside 1..={MAX_SERIES}"),
        ));
    }
    let mut guard = session.lock().await;
    let seed = match req.seed {
        Some(s) => s,
        None => {
            let s = guard.next_seed;
            guard.next_seed += 1;
            s
        }
    };
    let model = guard.model.clone();
    let mut guidance = state.guidance.clone();
    guidance.trace = req.trace;
    let request = EditRequest {
        constraints: req.constraints,
        seed,
        n,
    };
    let (request, result) = tokio::task::spawn_blocking(move || {
        let result = run_edit(&model.checkpoint.model, &model.schedule, &request, &guidance).and_then(|r| r.to_json());
        (request, result)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("sampler task failed: {e}")))?;
    let text = result?;
    guard.last_constraints = Some(request.constraints);
    Ok(json_bytes(text))
}
