//! HTTP service for single predictions and multi-turn refinement sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

use rtgrasp_core::client::{predict, ClientError, ModelClient};
use rtgrasp_core::cornell::{CornellSample, FoldAssignment};
use rtgrasp_core::dataset::DatasetRecord;
use rtgrasp_core::geometry::{pose_to_rect, GraspPose, GraspRectangle};
use rtgrasp_core::parser::{parse_pose, ParsedOutput};
use rtgrasp_core::session::{RefinementSession, Turn};

pub const DEFAULT_INSTRUCTION: &str = "Where should the robot grasp the object in this image? Answer with the grasp pose.";

/// Request body cap: the largest accepted image, base64 encoded, plus room
/// for the JSON around it.
const UPLOAD_LIMIT: usize = rtgrasp_core::client::MAX_IMAGE_BYTES / 3 * 4 + 64 * 1024;

#[derive(Debug, Clone, Serialize)]
pub struct ImageEntry {
    pub id: String,
    #[serde(skip)]
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub category: String,
    pub fold: Option<usize>,
    #[serde(skip)]
    pub gt_rects: Vec<GraspRectangle>,
}

/// Images the service can serve, keyed by id. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct ImageIndex {
    entries: BTreeMap<String, ImageEntry>,
}

impl ImageIndex {
    pub fn from_cornell(samples: &[CornellSample], folds: Option<&FoldAssignment>) -> Self {
        let entries = samples
            .iter()
            .map(|s| {
                let e = ImageEntry {
                    id: s.image_id.clone(),
                    path: s.image_path.clone(),
                    width: s.width,
                    height: s.height,
                    category: s.category.clone(),
                    fold: folds.and_then(|f| f.fold_of(&s.image_id)),
                    gt_rects: s.positive_rects.clone(),
                };
                (e.id.clone(), e)
            })
            .collect();
        Self { entries }
    }

    /// Records of a built dataset; folds are looked up by source image.
    pub fn from_records(records: &[DatasetRecord], dataset_dir: &Path, folds: Option<&FoldAssignment>) -> Self {
        let entries = records
            .iter()
            .map(|r| {
                let e = ImageEntry {
                    id: r.id.clone(),
                    path: dataset_dir.join(&r.image),
                    width: r.width,
                    height: r.height,
                    category: r.category.clone(),
                    fold: folds.and_then(|f| f.fold_of(&r.source_image)),
                    gt_rects: r.gt_rects.clone(),
                };
                (e.id.clone(), e)
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, id: &str) -> Option<&ImageEntry> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Rectangle size used to draw predicted poses, in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplayDims {
    pub w: f64,
    pub plate_len: f64,
}

impl Default for DisplayDims {
    fn default() -> Self {
        Self { w: 150.0, plate_len: 60.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub display: DisplayDims,
    pub default_instruction: String,
    /// Sessions are written here as `<session_id>.json` when set.
    pub session_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            display: DisplayDims::default(),
            default_instruction: DEFAULT_INSTRUCTION.into(),
            session_dir: None,
        }
    }
}

pub struct AppState {
    pub index: ImageIndex,
    pub client: Arc<dyn ModelClient>,
    pub config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<RefinementSession>>>>,
}

impl AppState {
    /// Builds the state, reloading any sessions already in the session
    /// directory.
    pub fn new(index: ImageIndex, client: Arc<dyn ModelClient>, config: ServiceConfig) -> std::io::Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.session_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                match serde_json::from_slice::<RefinementSession>(&std::fs::read(&path)?) {
                    Ok(s) => {
                        sessions.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
                    }
                    Err(e) => log::warn!("{}: skipping unreadable session: {e}", path.display()),
                }
            }
        }
        Ok(Self {
            index,
            client,
            config,
            sessions: RwLock::new(sessions),
        })
    }

    fn persist(&self, session: &RefinementSession) -> Result<(), ApiError> {
        let Some(dir) = &self.config.session_dir else {
            return Ok(());
        };
        let path = dir.join(format!("{}.json", session.session_id));
        let tmp = dir.join(format!(".{}.json.tmp", session.session_id));
        let bytes = serde_json::to_vec_pretty(session).expect("session serializes");
        std::fs::write(&tmp, bytes)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ApiError::internal(format!("persisting session: {e}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<ClientError> for ApiError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::ImageTooLarge { .. } => Self::new(StatusCode::PAYLOAD_TOO_LARGE, e.to_string()),
            ClientError::Contract(_) => Self::bad_request(e.to_string()),
            _ => Self::new(StatusCode::BAD_GATEWAY, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    /// Corner points in image pixels, in drawing order.
    pub vertices: [[f64; 2]; 4],
    pub w: f64,
    pub plate_len: f64,
}

fn overlay(pose: &GraspPose, dims: DisplayDims, width: u32, height: u32) -> Option<Overlay> {
    let r = pose_to_rect(pose, dims.w, dims.plate_len, width as f64, height as f64).ok()?;
    Some(Overlay {
        vertices: r.vertices().map(|v| [v.x, v.y]),
        w: dims.w,
        plate_len: dims.plate_len,
    })
}

#[derive(Debug, Serialize)]
pub struct PredictResponse {
    pub raw: String,
    pub reasoning: String,
    pub pose: Option<GraspPose>,
    pub diagnostics: Vec<String>,
    pub overlay: Option<Overlay>,
    pub width: u32,
    pub height: u32,
}

impl PredictResponse {
    fn new(raw: String, parsed: ParsedOutput, dims: DisplayDims, width: u32, height: u32) -> Self {
        Self {
            overlay: parsed.pose.as_ref().and_then(|p| overlay(p, dims, width, height)),
            raw,
            reasoning: parsed.reasoning_text,
            pose: parsed.pose,
            diagnostics: parsed.diagnostics,
            width,
            height,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SessionOverlay {
    /// Index into `history`.
    pub turn: usize,
    /// `initial` for the first parsed pose, `refined` for later ones.
    pub role: &'static str,
    pub latest: bool,
    pub pose: GraspPose,
    pub overlay: Option<Overlay>,
}

#[derive(Debug, Serialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub image_id: String,
    pub created_at: u64,
    pub raw: String,
    pub reasoning: String,
    pub pose: Option<GraspPose>,
    pub diagnostics: Vec<String>,
    pub overlay: Option<Overlay>,
    pub history: Vec<Turn>,
    pub overlays: Vec<SessionOverlay>,
}

fn session_response(s: &RefinementSession, entry: Option<&ImageEntry>, dims: DisplayDims) -> SessionResponse {
    let draw = |p: &GraspPose| entry.and_then(|e| overlay(p, dims, e.width, e.height));
    let posed: Vec<(usize, GraspPose)> = s
        .turns
        .iter()
        .enumerate()
        .filter_map(|(i, t)| Some((i, t.parsed.as_ref()?.pose?)))
        .collect();
    let overlays = posed
        .iter()
        .enumerate()
        .map(|(k, (turn, pose))| SessionOverlay {
            turn: *turn,
            role: if k == 0 { "initial" } else { "refined" },
            latest: k + 1 == posed.len(),
            pose: *pose,
            overlay: draw(pose),
        })
        .collect();
    let last = s.assistant_turns().last();
    let parsed = last.and_then(|t| t.parsed.clone()).unwrap_or_else(|| parse_pose(""));
    SessionResponse {
        session_id: s.session_id.clone(),
        image_id: s.image_id.clone(),
        created_at: s.created_at,
        raw: last.map(|t| t.text.clone()).unwrap_or_default(),
        reasoning: parsed.reasoning_text,
        overlay: parsed.pose.as_ref().and_then(draw),
        pose: parsed.pose,
        diagnostics: parsed.diagnostics,
        history: s.turns.clone(),
        overlays,
    }
}

#[derive(Debug, Deserialize)]
pub struct SamplesQuery {
    pub fold: Option<usize>,
}

async fn list_samples(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SamplesQuery>,
) -> Result<Json<Vec<ImageEntry>>, ApiError> {
    let all = state.index.entries.values();
    let out: Vec<ImageEntry> = match q.fold {
        None => all.cloned().collect(),
        Some(f) => {
            if state.index.entries.values().all(|e| e.fold.is_none()) {
                return Err(ApiError::bad_request("no fold assignment loaded"));
            }
            all.filter(|e| e.fold == Some(f)).cloned().collect()
        }
    };
    Ok(Json(out))
}

fn read_image(entry: &ImageEntry) -> Result<Vec<u8>, ApiError> {
    std::fs::read(&entry.path).map_err(|e| ApiError::internal(format!("reading image {}: {e}", entry.id)))
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = state.index.get(&id).ok_or_else(|| ApiError::not_found("image", &id))?;
    let bytes = read_image(entry)?;
    let mime = if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) { "image/jpeg" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
pub struct PredictRequest {
    pub image_id: Option<String>,
    /// Base64-encoded PNG or JPEG.
    pub upload: Option<String>,
    pub instruction: Option<String>,
}

async fn run_blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

async fn handle_predict(
    State(state): State<Arc<AppState>>,
    Json(req): Json<PredictRequest>,
) -> Result<Json<PredictResponse>, ApiError> {
    let (id, bytes, width, height) = match (&req.image_id, &req.upload) {
        (Some(id), None) => {
            let e = state.index.get(id).ok_or_else(|| ApiError::not_found("image", id))?;
            (Some(id.clone()), read_image(e)?, e.width, e.height)
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("upload is not base64: {e}")))?;
            let (w, h) = image::ImageReader::new(std::io::Cursor::new(&bytes))
                .with_guessed_format()
                .map_err(|e| ApiError::bad_request(e.to_string()))?
                .into_dimensions()
                .map_err(|e| ApiError::bad_request(format!("upload does not decode: {e}")))?;
            (None, bytes, w, h)
        }
        _ => return Err(ApiError::bad_request("give exactly one of image_id and upload")),
    };
    let instruction = req.instruction.unwrap_or_else(|| state.config.default_instruction.clone());
    let client = state.client.clone();
    let raw = run_blocking(move || predict(client.as_ref(), id.as_deref(), bytes, &instruction)).await??;
    let parsed = parse_pose(&raw);
    Ok(Json(PredictResponse::new(raw, parsed, state.config.display, width, height)))
}

#[derive(Debug, Deserialize)]
pub struct NewSessionRequest {
    pub image_id: String,
    pub instruction: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<NewSessionRequest>,
) -> Result<(StatusCode, Json<SessionResponse>), ApiError> {
    let entry = state
        .index
        .get(&req.image_id)
        .ok_or_else(|| ApiError::not_found("image", &req.image_id))?
        .clone();
    let bytes = read_image(&entry)?;
    let instruction = req.instruction.unwrap_or_else(|| state.config.default_instruction.clone());
    let client = state.client.clone();
    let id = uuid::Uuid::new_v4().to_string();
    let image_id = entry.id.clone();
    let (_, session) = run_blocking(move || {
        RefinementSession::start(client.as_ref(), id, image_id, bytes, &instruction, unix_now())
    })
    .await??;
    state.persist(&session)?;
    let body = session_response(&session, Some(&entry), state.config.display);
    state
        .sessions
        .write()
        .await
        .insert(session.session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn lookup(state: &AppState, id: &str) -> Result<Arc<Mutex<RefinementSession>>, ApiError> {
    state
        .sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("session", id))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionResponse>, ApiError> {
    let slot = lookup(&state, &id).await?;
    let session = slot.lock().await;
    let entry = state.index.get(&session.image_id);
    Ok(Json(session_response(&session, entry, state.config.display)))
}

#[derive(Debug, Deserialize)]
pub struct RefineRequest {
    pub message: String,
}

async fn refine_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<RefineRequest>,
) -> Result<Json<SessionResponse>, ApiError> {
    let slot = lookup(&state, &id).await?;
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, format!("session {id:?} is already being refined")))?;
    let entry = state
        .index
        .get(&guard.image_id)
        .ok_or_else(|| ApiError::not_found("image", &guard.image_id))?
        .clone();
    let bytes = read_image(&entry)?;
    let current = guard.clone();
    let client = state.client.clone();
    let (_, next) = run_blocking(move || current.refine(client.as_ref(), bytes, &req.message)).await??;
    state.persist(&next)?;
    *guard = next;
    Ok(Json(session_response(&guard, Some(&entry), state.config.display)))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/samples", get(list_samples))
        .route("/api/image/{id}", get(get_image))
        .route("/api/predict", post(handle_predict))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/refine", post(refine_session))
        .layer(axum::extract::DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(state)
}
