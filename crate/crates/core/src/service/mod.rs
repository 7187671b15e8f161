//! HTTP API over the session [`Registry`].
//!
//! | method | path | handler |
//! |---|---|---|
//! | POST | `/v1/sessions` | create a session |
//! | POST | `/v1/sessions/{id}/instructions` | acknowledge the instruction screen |
//! | GET | `/v1/sessions/{id}/trial` | current trial and its coverage |
//! | POST | `/v1/sessions/{id}/trials/{tid}/playback` | report played intervals |
//! | POST | `/v1/sessions/{id}/trials/{tid}/response` | submit a judgment |
//! | POST | `/v1/sessions/{id}/complete` | completion code and redirect |
//! | GET | `/v1/studies/{id}/progress` | operator progress report |
//! | GET | `/v1/stimuli/{id}/audio` | audio file, with range support |

mod config;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeFile;

use crate::session::{
    Clock, PlaybackEvent, Registry, RegistryConfig, ResponsePayload, SessionError, SystemClock,
};
use crate::storage::{replay_file, EventLog};

pub use config::{ConfigError, ServiceConfig, StudyConfig, ENV_DATA_DIR, ENV_MAC_KEY, ENV_PORT, LOG_FILE};

pub struct AppState {
    pub registry: Arc<Registry>,
    audio_roots: HashMap<String, PathBuf>,
    operator_token: Option<String>,
}

impl AppState {
    pub fn new(registry: Arc<Registry>, audio_roots: HashMap<String, PathBuf>, operator_token: Option<String>) -> Self {
        AppState {
            registry,
            audio_roots,
            operator_token,
        }
    }
}

/// Opens the event log for writing and recovers all sessions from it.
pub fn open_state(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<AppState, ConfigError> {
    let key = config.mac_key()?;
    let (studies, roots) = split_studies(config)?;
    let (log, records) = EventLog::open(config.log_path())?;
    let registry = Registry::recover(
        studies,
        log,
        records,
        clock,
        RegistryConfig {
            mac_key: key,
            tolerance_ms: config.tolerance_ms,
        },
    )?;
    Ok(AppState::new(Arc::new(registry), roots, config.operator_token.clone()))
}

/// Rebuilds sessions from the log without opening it for writing. Returns
/// the registry and, if replay stopped early, the last verified sequence.
pub fn replay_registry(config: &ServiceConfig) -> Result<(Registry, Option<u64>), ConfigError> {
    let key = config.mac_key()?;
    let (studies, _) = split_studies(config)?;
    let path = config.log_path();
    let mut records = Vec::new();
    let mut halted = None;
    if path.exists() {
        for r in replay_file(&path, 1)? {
            match r {
                Ok(rec) => records.push(rec),
                Err(halt) => halted = Some(halt.last_good_seq),
            }
        }
    }
    let registry = Registry::recover(
        studies,
        EventLog::in_memory(),
        records,
        Arc::new(SystemClock),
        RegistryConfig {
            mac_key: key,
            tolerance_ms: config.tolerance_ms,
        },
    )?;
    Ok((registry, halted))
}

type Studies = (Vec<crate::session::StudyRuntime>, HashMap<String, PathBuf>);

fn split_studies(config: &ServiceConfig) -> Result<Studies, ConfigError> {
    let mut studies = Vec::new();
    let mut roots = HashMap::new();
    for (s, root) in config.load_studies()? {
        roots.insert(s.study_id().to_string(), root);
        studies.push(s);
    }
    Ok((studies, roots))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/instructions", post(acknowledge))
        .route("/v1/sessions/{id}/trial", get(current_trial))
        .route("/v1/sessions/{id}/trials/{tid}/playback", post(playback))
        .route("/v1/sessions/{id}/trials/{tid}/response", post(response))
        .route("/v1/sessions/{id}/complete", post(complete))
        .route("/v1/studies/{id}/progress", get(progress))
        .route("/v1/stimuli/{id}/audio", get(audio))
        .with_state(state)
}

/// Binds and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ConfigError> {
    let state = open_state(&config, Arc::new(SystemClock))?;
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| ConfigError::Io {
        path: PathBuf::from(&addr),
        source,
    })?;
    tracing::info!(%addr, studies = config.studies.len(), "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ConfigError::Io {
            path: PathBuf::from(addr),
            source,
        })
}

struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &SessionError) -> StatusCode {
    match e {
        SessionError::NotFound(_) => StatusCode::NOT_FOUND,
        SessionError::Conflict { .. } | SessionError::InstructionsPending | SessionError::OutOfOrder { .. } => {
            StatusCode::CONFLICT
        }
        SessionError::Forbidden(_) => StatusCode::FORBIDDEN,
        SessionError::PlaybackRejected { .. } | SessionError::Schema(_) => StatusCode::UNPROCESSABLE_ENTITY,
        SessionError::PlaybackIncomplete { .. } | SessionError::Premature { .. } => StatusCode::PRECONDITION_FAILED,
        SessionError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        SessionError::Inconsistent(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_code(e: &SessionError) -> &'static str {
    match e {
        SessionError::NotFound(_) => "not-found",
        SessionError::Conflict { .. } => "conflict",
        SessionError::Forbidden(_) => "forbidden",
        SessionError::InstructionsPending => "instructions-pending",
        SessionError::OutOfOrder { .. } => "out-of-order",
        SessionError::PlaybackRejected { .. } => "playback-rejected",
        SessionError::PlaybackIncomplete { .. } => "playback-incomplete",
        SessionError::Schema(_) => "schema",
        SessionError::Premature { .. } => "premature",
        SessionError::Unavailable(_) => "unavailable",
        SessionError::Inconsistent(_) => "internal",
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let mut body = json!({ "error": error_code(&e), "message": e.to_string() });
        match &e {
            SessionError::PlaybackIncomplete { covered_ms, required_ms } => {
                body["covered_ms"] = json!(covered_ms);
                body["required_ms"] = json!(required_ms);
            }
            SessionError::Premature { remaining } => body["remaining"] = json!(remaining),
            SessionError::OutOfOrder { expected, .. } => body["expected_trial_id"] = json!(expected),
            SessionError::PlaybackRejected { index, .. } => body["event_index"] = json!(index),
            _ => {}
        }
        (status_of(&e), Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

/// Registry calls fsync the log, so they run off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SessionError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(SessionError::Inconsistent(e.to_string())))?
        .map_err(ApiError)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    study_id: String,
    rater_token: String,
    #[serde(default)]
    participant_id: String,
    #[serde(default)]
    crowd_session_id: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult {
    let registry = state.registry.clone();
    let created = blocking(move || {
        registry.create_session(
            &req.study_id,
            &req.rater_token,
            &req.participant_id,
            req.crowd_session_id.as_deref(),
        )
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn acknowledge(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let registry = state.registry.clone();
    blocking(move || registry.acknowledge(&id)).await?;
    Ok(Json(json!({ "acknowledged": true })).into_response())
}

async fn current_trial(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let registry = state.registry.clone();
    let status = blocking(move || registry.current_trial(&id)).await?;
    Ok(Json(status).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaybackBatch {
    events: Vec<PlaybackEvent>,
}

async fn playback(
    State(state): State<Arc<AppState>>,
    Path((id, tid)): Path<(String, String)>,
    Json(batch): Json<PlaybackBatch>,
) -> ApiResult {
    let registry = state.registry.clone();
    let status = blocking(move || registry.record_playback(&id, &tid, &batch.events)).await?;
    Ok(Json(status).into_response())
}

async fn response(
    State(state): State<Arc<AppState>>,
    Path((id, tid)): Path<(String, String)>,
    Json(payload): Json<ResponsePayload>,
) -> ApiResult {
    let registry = state.registry.clone();
    let ack = blocking(move || registry.submit_response(&id, &tid, payload)).await?;
    Ok(Json(ack).into_response())
}

async fn complete(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let registry = state.registry.clone();
    let done = blocking(move || registry.complete_session(&id)).await?;
    Ok(Json(done).into_response())
}

async fn progress(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult {
    if let Some(token) = &state.operator_token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Ok((
                StatusCode::UNAUTHORIZED,
                Json(json!({ "error": "unauthorized", "message": "operator token required" })),
            )
                .into_response());
        }
    }
    let report = state.registry.progress(&id)?;
    Ok(Json(report).into_response())
}

async fn audio(State(state): State<Arc<AppState>>, Path(id): Path<String>, req: Request) -> ApiResult {
    let found = state
        .registry
        .studies()
        .find_map(|s| s.stimulus(&id).map(|st| (s.study_id().to_string(), st.audio_ref.clone())));
    let Some((study_id, audio_ref)) = found else {
        return Err(SessionError::NotFound(format!("stimulus `{id}`")).into());
    };
    if audio_ref.starts_with("http://") || audio_ref.starts_with("https://") {
        return Ok(Redirect::temporary(&audio_ref).into_response());
    }
    let path = state
        .audio_roots
        .get(&study_id)
        .map(|root| root.join(&audio_ref))
        .unwrap_or_else(|| PathBuf::from(&audio_ref));
    match ServeFile::new(path).try_call(req).await {
        Ok(res) => Ok(res.map(Body::new)),
        Err(e) => Err(SessionError::Unavailable(e.to_string()).into()),
    }
}
