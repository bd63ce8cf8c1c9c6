//! JSON-over-HTTP interactive segmentation sessions.
//!
//! Each session caches the stage-1 features of one image; clicks only run
//! stage 2. Requests to one session are serialized, different sessions run
//! concurrently.

pub mod png1;
pub mod rle;

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use fdrn_core::interaction::{run_interaction_step, Stage};
use fdrn_core::model::FeatureBundle;
use fdrn_core::{ClickHistory, ClickPoint, FdrnModel, ImageTensor, InteractionConfig, Polarity, ProbMask, RoiBox, SessionState};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use rle::Rle;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Idle time after which a session is dropped.
    pub ttl: Duration,
    pub max_undo: usize,
    pub max_image_side: usize,
    pub max_body_bytes: usize,
    /// Served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ttl: Duration::from_secs(30 * 60),
            max_undo: 64,
            max_image_side: 4096,
            max_body_bytes: 64 << 20,
            static_dir: Some(default_static_dir()),
        }
    }
}

/// The bundled `static/` directory, overridable with `FDRN_STATIC_DIR`.
pub fn default_static_dir() -> PathBuf {
    std::env::var_os("FDRN_STATIC_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/static")))
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown session {0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Validation(_) => "validation",
            ApiError::Conflict(_) => "conflict",
            ApiError::TooLarge(_) => "too_large",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({"error": self.kind(), "message": self.to_string()});
        (self.status(), Json(body)).into_response()
    }
}

impl From<fdrn_core::Error> for ApiError {
    fn from(e: fdrn_core::Error) -> Self {
        use fdrn_core::Error as E;
        match e {
            E::Invalid(m) => ApiError::Validation(m),
            E::Shape(m) => ApiError::BadRequest(m),
            E::Image(e) => ApiError::BadRequest(format!("undecodable image: {e}")),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// One live session and its undo stack of `(history, mask)` snapshots.
pub struct SessionRecord {
    pub id: String,
    pub state: SessionState<FeatureBundle>,
    pub created_at: Instant,
    pub last_active: Instant,
    pub undo: VecDeque<(ClickHistory, ProbMask)>,
}

impl SessionRecord {
    pub fn has_prediction(&self) -> bool {
        !self.state.history.is_empty()
    }
}

type Shared = Arc<tokio::sync::Mutex<SessionRecord>>;

pub struct AppState {
    pub model: Arc<FdrnModel>,
    pub interaction: InteractionConfig,
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, Shared>>,
}

impl AppState {
    pub fn new(model: Arc<FdrnModel>, interaction: InteractionConfig, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { model, interaction, config, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn lookup(&self, id: &str) -> ApiResult<Shared> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    /// Drops sessions idle for longer than the TTL at `now`; busy sessions are kept.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let ttl = self.config.ttl;
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| match s.try_lock() {
            Ok(rec) => now.saturating_duration_since(rec.last_active) <= ttl,
            Err(_) => true,
        });
        let evicted = before - sessions.len();
        if evicted > 0 {
            log::info!("evicted {evicted} idle sessions");
        }
        evicted
    }
}

#[derive(Debug, Deserialize)]
pub struct OpenRequest {
    /// Base64 image file (PNG or JPEG).
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OpenResponse {
    pub session_id: String,
    pub t_f1_ms: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickRequest {
    pub x: i64,
    pub y: i64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbSummary {
    pub mean: f32,
    pub max: f32,
    pub foreground_pixels: usize,
    pub threshold: f32,
}

impl ProbSummary {
    fn of(mask: &ProbMask) -> Self {
        let d = mask.data();
        Self {
            mean: d.mean().unwrap_or(0.0),
            max: d.iter().copied().fold(0.0, f32::max),
            foreground_pixels: d.iter().filter(|&&p| p > mask.threshold).count(),
            threshold: mask.threshold,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClickResponse {
    pub mask_rle: Rle,
    pub iou_hint: Option<f64>,
    pub t_f2_ms: f64,
    pub click: ClickPoint,
    pub roi: RoiBox,
    pub probability: ProbSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndoStatus {
    Undone,
    NothingToUndo,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UndoResponse {
    pub status: UndoStatus,
    pub clicks: usize,
    pub mask_rle: Rle,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub clicks: Vec<ClickPoint>,
    pub undo_depth: usize,
    pub t_f1_ms: Vec<f64>,
    pub t_f2_ms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    #[default]
    Rle,
    Png,
}

#[derive(Debug, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub format: MaskFormat,
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/clicks", post(submit_click))
        .route("/sessions/{id}/undo", post(undo_click))
        .route("/sessions/{id}/mask", get(export_mask))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn open_session(State(app): State<Arc<AppState>>, Json(req): Json<OpenRequest>) -> ApiResult<Json<OpenResponse>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.image.trim())
        .map_err(|e| ApiError::BadRequest(format!("invalid base64: {e}")))?;
    let model = app.model.clone();
    let max_side = app.config.max_image_side;
    let state = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let image = ImageTensor::decode(&bytes)?;
        let (h, w) = image.dims();
        if h.max(w) > max_side {
            return Err(ApiError::TooLarge(format!("image {h}x{w} exceeds {max_side} pixels per side")));
        }
        Ok(SessionState::open(Arc::new(image), &*model)?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    let id = format!("{:032x}", rand::random::<u128>());
    let (height, width) = state.image.dims();
    let t_f1_ms = state.stage_times(Stage::Stage1).sum();
    let now = Instant::now();
    let rec = SessionRecord { id: id.clone(), state, created_at: now, last_active: now, undo: VecDeque::new() };
    app.sessions.lock().unwrap().insert(id.clone(), Arc::new(tokio::sync::Mutex::new(rec)));
    log::info!("opened session {id} ({width}x{height}) in {t_f1_ms:.1} ms");
    Ok(Json(OpenResponse { session_id: id, t_f1_ms, width, height }))
}

async fn session_info(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let shared = app.lookup(&id)?;
    let rec = shared.lock().await;
    let (height, width) = rec.state.image.dims();
    Ok(Json(SessionInfo {
        session_id: rec.id.clone(),
        width,
        height,
        clicks: rec.state.history.clicks().to_vec(),
        undo_depth: rec.undo.len(),
        t_f1_ms: rec.state.stage_times(Stage::Stage1).collect(),
        t_f2_ms: rec.state.stage_times(Stage::Stage2).collect(),
    }))
}

async fn submit_click(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> ApiResult<Json<ClickResponse>> {
    let shared = app.lookup(&id)?;
    let mut rec = shared.lock_owned().await;
    let (h, w) = rec.state.image.dims();
    if req.x < 0 || req.y < 0 || req.x as usize >= w || req.y as usize >= h {
        return Err(ApiError::Validation(format!("click ({}, {}) outside the {w}x{h} image", req.x, req.y)));
    }
    let click = ClickPoint::new(req.y as usize, req.x as usize, req.polarity);
    let app2 = app.clone();
    let (rec, out) = tokio::task::spawn_blocking(move || {
        let snapshot = (rec.state.history.clone(), rec.state.last_mask.clone());
        let out = run_interaction_step(&mut rec.state, click, &*app2.model, &app2.interaction);
        if out.is_ok() {
            rec.undo.push_back(snapshot);
            while rec.undo.len() > app2.config.max_undo {
                rec.undo.pop_front();
            }
        }
        rec.last_active = Instant::now();
        (rec, out)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    let (mask, t_f2_ms, roi) = out?;
    Ok(Json(ClickResponse {
        mask_rle: rle::encode(&mask.binarize()),
        iou_hint: None,
        t_f2_ms,
        click: *rec.state.history.current().expect("click was recorded"),
        roi,
        probability: ProbSummary::of(&mask),
    }))
}

async fn undo_click(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<UndoResponse>> {
    let shared = app.lookup(&id)?;
    let mut rec = shared.lock().await;
    rec.last_active = Instant::now();
    let status = match rec.undo.pop_back() {
        Some((history, mask)) => {
            rec.state.iteration = history.len();
            rec.state.history = history;
            rec.state.last_mask = mask;
            UndoStatus::Undone
        }
        None => UndoStatus::NothingToUndo,
    };
    Ok(Json(UndoResponse {
        status,
        clicks: rec.state.history.len(),
        mask_rle: rle::encode(&rec.state.last_mask.binarize()),
    }))
}

async fn export_mask(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<MaskQuery>,
) -> ApiResult<Response> {
    let shared = app.lookup(&id)?;
    let mut rec = shared.lock().await;
    rec.last_active = Instant::now();
    if !rec.has_prediction() {
        return Err(ApiError::Conflict("session has no prediction yet".into()));
    }
    let mask = rec.state.last_mask.binarize();
    Ok(match q.format {
        MaskFormat::Rle => Json(rle::encode(&mask)).into_response(),
        MaskFormat::Png => {
            let bytes = png1::encode_png(&mask).map_err(|e| ApiError::Internal(e.to_string()))?;
            ([(header::CONTENT_TYPE, "image/png")], Bytes::from(bytes)).into_response()
        }
    })
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    match app.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::NotFound(id)),
    }
}

/// Serves until the process is stopped, sweeping idle sessions periodically.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let sweeper = state.clone();
    let period = (state.config.ttl / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            sweeper.evict_idle(Instant::now());
        }
    });
    axum::serve(listener, router(state)).await
}
