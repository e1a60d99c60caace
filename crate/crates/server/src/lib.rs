//! JSON-over-HTTP service for interactive segmentation sessions.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hasher};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use ptss::checkpoint::to_bytes;
use ptss::data::{parse_series, Dataset, GranularitySpec, Level, MultivariateSeries, Split, DEFAULT_SPLIT};
use ptss::exec::Execution;
use ptss::network::ModelParams;
use ptss::prompt::{Prompt, PromptKind};
use ptss::session::{argmax_in_level, evaluate, Delta, Evaluation, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    SchemaMismatch,
    UnknownModel,
    UnknownSession,
    UnknownDataset,
    NoSuchPrompt,
    SlotOccupied,
    ConflictingBoundary,
    NothingToUndo,
    PayloadTooLarge,
    TimestepOutOfRange,
    InvalidPrompt,
    EmptyDataset,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        use ErrorCode::*;
        match self {
            BadRequest | SchemaMismatch => StatusCode::BAD_REQUEST,
            UnknownModel | UnknownSession | UnknownDataset | NoSuchPrompt => StatusCode::NOT_FOUND,
            SlotOccupied | ConflictingBoundary | NothingToUndo => StatusCode::CONFLICT,
            PayloadTooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            TimestepOutOfRange | InvalidPrompt | EmptyDataset => StatusCode::UNPROCESSABLE_ENTITY,
            Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ptss::Error> for ApiError {
    fn from(e: ptss::Error) -> Self {
        use ptss::Error as E;
        let code = match &e {
            E::SchemaMismatch(_)
            | E::LabelOutOfRange { .. }
            | E::NonUniformSampling { .. }
            | E::WindowTooLong { .. }
            | E::ShapeMismatch(_)
            | E::Json(_) => ErrorCode::SchemaMismatch,
            E::TimestepOutOfRange { .. } => ErrorCode::TimestepOutOfRange,
            E::InvalidPrompt(_) | E::StateOutOfRange { .. } => ErrorCode::InvalidPrompt,
            E::SlotOccupied(_) => ErrorCode::SlotOccupied,
            E::ConflictingBoundary(_) => ErrorCode::ConflictingBoundary,
            E::NoSuchPrompt { .. } => ErrorCode::NoSuchPrompt,
            E::NothingToUndo => ErrorCode::NothingToUndo,
            E::EmptyDataset(_) | E::DegenerateSplit(_) => ErrorCode::EmptyDataset,
            E::InvalidWindow(_) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Upper bounds on uploaded series.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_timesteps: usize,
    pub max_channels: usize,
    pub max_body_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_timesteps: 1_000_000,
            max_channels: 32,
            max_body_bytes: 256 << 20,
        }
    }
}

struct SessionSlot {
    model: String,
    session: Arc<Mutex<Session>>,
}

pub struct ModelEntry {
    pub params: Arc<ModelParams<f32>>,
    pub digest: String,
}

impl ModelEntry {
    pub fn new(params: ModelParams<f32>) -> ptss::Result<Self> {
        let mut h = DefaultHasher::new();
        h.write(&to_bytes(&params, true)?);
        Ok(Self {
            params: Arc::new(params),
            digest: format!("{:016x}", h.finish()),
        })
    }
}

/// Shared service state: loaded models, optional demo datasets, sessions.
pub struct AppState {
    models: RwLock<BTreeMap<String, ModelEntry>>,
    datasets: BTreeMap<String, Dataset>,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    next_id: AtomicU64,
    pub limits: Limits,
    pub exec: Execution,
}

impl AppState {
    pub fn new(limits: Limits) -> Self {
        Self {
            models: RwLock::new(BTreeMap::new()),
            datasets: BTreeMap::new(),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            limits,
            exec: Execution::default(),
        }
    }

    pub fn add_model(&self, id: impl Into<String>, params: ModelParams<f32>) -> ptss::Result<()> {
        let entry = ModelEntry::new(params)?;
        self.models.write().expect("model registry poisoned").insert(id.into(), entry);
        Ok(())
    }

    pub fn add_dataset(&mut self, name: impl Into<String>, dataset: Dataset) {
        self.datasets.insert(name.into(), dataset);
    }

    fn model(&self, id: &str) -> ApiResult<Arc<ModelParams<f32>>> {
        self.models
            .read()
            .expect("model registry poisoned")
            .get(id)
            .map(|m| m.params.clone())
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownModel, format!("no model `{id}`")))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        Ok(self.slot(id)?.1)
    }

    fn slot(&self, id: &str) -> ApiResult<(String, Arc<Mutex<Session>>)> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .map(|s| (s.model.clone(), s.session.clone()))
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("no session `{id}`")))
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let body_limit = state.limits.max_body_bytes;
    let api = Router::new()
        .route("/health", get(health))
        .route("/api/models", get(list_models))
        .route("/api/datasets", get(list_datasets))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session).delete(close_session))
        .route("/api/sessions/{id}/series", get(get_series))
        .route("/api/sessions/{id}/prediction", get(get_prediction))
        .route("/api/sessions/{id}/prompts", post(add_prompt).delete(remove_prompt))
        .route("/api/sessions/{id}/undo", post(undo))
        .route("/api/sessions/{id}/eval", post(eval_session))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Runs blocking model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

fn lock(s: &Mutex<Session>) -> std::sync::MutexGuard<'_, Session> {
    s.lock().unwrap_or_else(|p| p.into_inner())
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("invalid JSON body: {e}")))
}

fn body_bytes(body: Result<Bytes, BytesRejection>) -> ApiResult<Bytes> {
    body.map_err(|r| {
        let code = if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ErrorCode::PayloadTooLarge
        } else {
            ErrorCode::BadRequest
        };
        ApiError::new(code, r.body_text())
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let models: Vec<Value> = state
        .models
        .read()
        .expect("model registry poisoned")
        .iter()
        .map(|(id, m)| json!({"id": id, "digest": m.digest}))
        .collect();
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION"), "models": models}))
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<Value> {
    let models: Vec<Value> = state
        .models
        .read()
        .expect("model registry poisoned")
        .iter()
        .map(|(id, m)| {
            let c = &m.params.config;
            json!({
                "id": id,
                "digest": m.digest,
                "window": c.window,
                "channels": c.channels,
                "k_total": c.k_total,
                "levels": c.levels,
            })
        })
        .collect();
    Json(Value::Array(models))
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Value> {
    let sets: Vec<Value> = state
        .datasets
        .iter()
        .map(|(name, d)| {
            let series: Vec<Value> = d.series.iter().map(|s| json!({"id": s.id, "length": s.len()})).collect();
            json!({"name": name, "levels": d.spec.levels, "series": series})
        })
        .collect();
    Json(Value::Array(sets))
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    model: String,
    csv: Option<String>,
    dataset: Option<String>,
    #[serde(default)]
    series: usize,
    stride: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct CsvQuery {
    model: String,
    stride: Option<usize>,
}

/// Parses an uploaded CSV; the label columns are optional.
fn parse_upload(csv: &str, levels: &[Level]) -> ApiResult<MultivariateSeries> {
    let header = csv.lines().next().unwrap_or_default();
    let labeled = header.split(',').any(|c| c.trim() == "y0");
    let spec = GranularitySpec {
        levels: if labeled { levels.to_vec() } else { Vec::new() },
    };
    Ok(parse_series("upload", csv, &spec)?)
}

#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    model: String,
    length: usize,
    channels: usize,
    window: usize,
    stride: usize,
    levels: Vec<Level>,
    labeled: bool,
    prompts: Vec<Prompt>,
    history_depth: usize,
}

fn view(session: &Session, model: &str) -> SessionView {
    SessionView {
        session_id: session.id.clone(),
        model: model.to_string(),
        length: session.series.len(),
        channels: session.series.channels(),
        window: session.model.config.window,
        stride: session.stride(),
        levels: session.model.config.levels.clone(),
        labeled: session.series.levels() > 0,
        prompts: session.prompts().iter().collect(),
        history_depth: session.history().len(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    query: Result<Query<CsvQuery>, QueryRejection>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let body = body_bytes(body)?;
    let is_csv = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("text/csv"));
    let (model_id, stride, series) = if is_csv {
        let Ok(Query(q)) = query else {
            return Err(ApiError::new(ErrorCode::BadRequest, "CSV upload needs ?model="));
        };
        let model = state.model(&q.model)?;
        let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(ErrorCode::SchemaMismatch, e.to_string()))?;
        (q.model, q.stride, parse_upload(text, &model.config.levels)?)
    } else {
        let req: CreateSession = parse_json(&body)?;
        let model = state.model(&req.model)?;
        let series = match (&req.csv, &req.dataset) {
            (Some(csv), None) => parse_upload(csv, &model.config.levels)?,
            (None, Some(name)) => {
                let ds = state
                    .datasets
                    .get(name)
                    .ok_or_else(|| ApiError::new(ErrorCode::UnknownDataset, format!("no dataset `{name}`")))?;
                ds.series
                    .get(req.series)
                    .cloned()
                    .ok_or_else(|| ApiError::new(ErrorCode::UnknownDataset, format!("dataset `{name}` has no series {}", req.series)))?
            }
            _ => return Err(ApiError::new(ErrorCode::BadRequest, "give exactly one of `csv` or `dataset`")),
        };
        (req.model, req.stride, series)
    };
    if series.len() > state.limits.max_timesteps || series.channels() > state.limits.max_channels {
        return Err(ApiError::new(
            ErrorCode::PayloadTooLarge,
            format!(
                "series of {}x{} exceeds the {}x{} limit",
                series.len(),
                series.channels(),
                state.limits.max_timesteps,
                state.limits.max_channels
            ),
        ));
    }
    let model = state.model(&model_id)?;
    let id = format!("s{}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let stride = stride.unwrap_or((model.config.window / 2).max(1));
    let sid = id.clone();
    let session = blocking(move || Ok(Session::new(sid, model, series, stride)?)).await?;
    let mut body = serde_json::to_value(view(&session, &model_id)).expect("serializable view");
    body["summary"] = json!({
        "level_scores": session.result().level_scores,
        "segments": segment_count(&session.result().states),
    });
    state.sessions.write().expect("session table poisoned").insert(
        id,
        SessionSlot {
            model: model_id,
            session: Arc::new(Mutex::new(session)),
        },
    );
    Ok((StatusCode::CREATED, Json(body)))
}

fn segment_count(states: &[usize]) -> usize {
    if states.is_empty() {
        0
    } else {
        1 + states.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let (model, s) = state.slot(&id)?;
    let s = lock(&s);
    Ok(Json(view(&s, &model)))
}

async fn close_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state
        .sessions
        .write()
        .expect("session table poisoned")
        .remove(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("no session `{id}`")))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_series(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = state.session(&id)?;
    let s = lock(&s);
    let channels: Vec<Vec<f32>> = s.series.values.columns().into_iter().map(|c| c.to_vec()).collect();
    Ok(Json(json!({
        "channel_names": s.series.channel_names,
        "channels": channels,
        "labels": s.series.label_tracks,
    })))
}

#[derive(Debug, Deserialize)]
struct PredictionQuery {
    #[serde(default)]
    probs: bool,
}

async fn get_prediction(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Json<Value>> {
    let s = state.session(&id)?;
    let s = lock(&s);
    let res = s.result();
    let spec = GranularitySpec {
        levels: s.model.config.levels.clone(),
    };
    let levels: Vec<Value> = spec
        .levels
        .iter()
        .enumerate()
        .map(|(g, l)| json!({"name": l.name, "states": argmax_in_level(&res.probs, spec.level_range(g))}))
        .collect();
    let mut out = json!({
        "length": res.len(),
        "states": res.states,
        "level_scores": res.level_scores,
        "levels": levels,
    });
    if q.probs {
        let probs: Vec<Vec<f64>> = res.probs.rows().into_iter().map(|r| r.to_vec()).collect();
        out["probs"] = json!(probs);
    }
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct AddQuery {
    #[serde(default)]
    replace: bool,
}

async fn edit(state: Arc<AppState>, id: String, f: impl FnOnce(&mut Session) -> ptss::Result<Delta> + Send + 'static) -> ApiResult<Json<Delta>> {
    let s = state.session(&id)?;
    let delta = blocking(move || {
        let mut guard = lock(&s);
        Ok(f(&mut guard)?)
    })
    .await?;
    Ok(Json(delta))
}

async fn add_prompt(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<AddQuery>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<Json<Delta>> {
    let prompt: Prompt = parse_json(&body_bytes(body)?)?;
    edit(state, id, move |s| s.add_prompt(prompt, q.replace)).await
}

#[derive(Debug, Deserialize)]
struct RemoveQuery {
    t: usize,
    kind: String,
}

async fn remove_prompt(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<RemoveQuery>, QueryRejection>,
) -> ApiResult<Json<Delta>> {
    let Query(q) = q.map_err(|e| ApiError::new(ErrorCode::BadRequest, e.body_text()))?;
    let kind = match q.kind.as_str() {
        "label" => PromptKind::Label,
        "boundary" => PromptKind::Boundary,
        other => return Err(ApiError::new(ErrorCode::BadRequest, format!("unknown prompt kind `{other}`"))),
    };
    edit(state, id, move |s| s.remove_prompt(q.t, kind)).await
}

async fn undo(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Delta>> {
    edit(state, id, |s| s.undo()).await
}

#[derive(Debug, Deserialize)]
struct EvalRequest {
    fractions: Vec<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_split")]
    split: Split,
}

fn default_split() -> Split {
    Split::Test
}

/// Scores the session's labeled series as a one-series dataset, matching
/// what the command-line `eval` reports for the same series and seed.
async fn eval_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Bytes, BytesRejection>,
) -> ApiResult<Json<Vec<Evaluation>>> {
    let req: EvalRequest = parse_json(&body_bytes(body)?)?;
    if req.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(ApiError::new(ErrorCode::BadRequest, "fractions must lie in [0, 1]"));
    }
    let s = state.session(&id)?;
    let exec = state.exec;
    let rows = blocking(move || {
        let (series, model) = {
            let g = lock(&s);
            (g.series.clone(), g.model.clone())
        };
        if series.levels() == 0 {
            return Err(ApiError::new(ErrorCode::EmptyDataset, "series has no labels"));
        }
        let spec = GranularitySpec {
            levels: model.config.levels.clone(),
        };
        let ds = Dataset::new(vec![series], spec, DEFAULT_SPLIT)?;
        req.fractions
            .iter()
            .map(|&f| Ok(evaluate(&model, &ds, req.split, f, req.seed, exec)?))
            .collect::<ApiResult<Vec<_>>>()
    })
    .await?;
    Ok(Json(rows))
}

/// Serves `app` until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}
