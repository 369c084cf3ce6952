//! Annotation HTTP service: batch task issue, rating collection, progress and export.
//!
//! Routes:
//! - `GET /instructions`
//! - `GET /tasks/next?annotator=ID` (204 when the batch is done)
//! - `POST /ratings` (201 after the record is on disk)
//! - `GET /images/{id}`
//! - `GET /progress?annotator=ID`
//! - `GET /export` (CSV)

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use moral_align_core::annotation::{
    write_export_csv, AnnotationSession, BatchPlan, RatingStore, RatingSubmission,
};
use moral_align_core::config::{parse_value, unknown_key};
use moral_align_core::{Error, KvConfig};
use serde::{Deserialize, Serialize};

pub const DEFAULT_INSTRUCTIONS: &str = "\
# Rating instructions

For each image, rate every one of the five moral foundations.

- **virtue**: the image shows the foundation being upheld.
- **vice**: the image shows the foundation being violated.
- **neutral**: the foundation is not at stake.

Rate what the image depicts, not how you feel about the subject. Use the notes
field for anything ambiguous. You can resubmit an image to correct a rating;
the latest submission counts.
";

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub image_dir: PathBuf,
    pub plan_path: PathBuf,
    pub store_path: PathBuf,
    /// Markdown served by `/instructions`; the built-in text when unset.
    pub instructions_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            image_dir: PathBuf::from("images"),
            plan_path: PathBuf::from("batch_plan.json"),
            store_path: PathBuf::from("ratings.jsonl"),
            instructions_path: None,
        }
    }
}

impl KvConfig for ServiceConfig {
    fn set(&mut self, key: &str, value: &str) -> moral_align_core::Result<()> {
        match key {
            "listen" => self.listen = parse_value(key, value)?,
            "image_dir" => self.image_dir = value.into(),
            "plan_path" => self.plan_path = value.into(),
            "store_path" => self.store_path = value.into(),
            "instructions_path" => {
                self.instructions_path = (!value.is_empty()).then(|| value.into())
            }
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let show = |p: &Path| p.display().to_string();
        vec![
            ("listen", self.listen.to_string()),
            ("image_dir", show(&self.image_dir)),
            ("plan_path", show(&self.plan_path)),
            ("store_path", show(&self.store_path)),
            (
                "instructions_path",
                self.instructions_path
                    .as_deref()
                    .map(show)
                    .unwrap_or_default(),
            ),
        ]
    }
}

pub struct AppState {
    /// Submissions take the write lock, so appends are serialized.
    session: RwLock<AnnotationSession>,
    image_dir: PathBuf,
    instructions: String,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(session: AnnotationSession, image_dir: PathBuf, instructions: String) -> Self {
        AppState {
            session: RwLock::new(session),
            image_dir,
            instructions,
        }
    }

    /// Loads the plan, opens (and repairs) the store, reads the instructions.
    pub fn open(cfg: &ServiceConfig) -> moral_align_core::Result<Self> {
        let plan = BatchPlan::read(&cfg.plan_path)?;
        let store = RatingStore::open(&cfg.store_path)?;
        let instructions = match &cfg.instructions_path {
            Some(p) => std::fs::read_to_string(p)?,
            None => DEFAULT_INSTRUCTIONS.to_string(),
        };
        Ok(Self::new(
            AnnotationSession::new(plan, store)?,
            cfg.image_dir.clone(),
            instructions,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                error: error.into(),
                field,
            },
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Validation { field, message } => ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                message.clone(),
                Some(field.clone()),
            ),
            Error::UnknownId(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string(), None),
            _ if e.is_validation() => ApiError::new(StatusCode::BAD_REQUEST, e.to_string(), None),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

impl AnnotatorQuery {
    fn require(self) -> ApiResult<String> {
        self.annotator.filter(|a| !a.is_empty()).ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "missing query parameter",
                Some("annotator".into()),
            )
        })
    }
}

fn poisoned() -> ApiError {
    ApiError::new(
        StatusCode::INTERNAL_SERVER_ERROR,
        "session lock poisoned",
        None,
    )
}

async fn instructions(State(s): State<SharedState>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/markdown; charset=utf-8")],
        s.instructions.clone(),
    )
}

async fn next_task(
    State(s): State<SharedState>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Response> {
    let annotator = q.require()?;
    let session = s.session.read().map_err(|_| poisoned())?;
    Ok(match session.next_task(&annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn progress(
    State(s): State<SharedState>,
    Query(q): Query<AnnotatorQuery>,
) -> ApiResult<Response> {
    let annotator = q.require()?;
    let session = s.session.read().map_err(|_| poisoned())?;
    Ok(Json(session.progress(&annotator)?).into_response())
}

async fn submit(State(s): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let sub: RatingSubmission = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("malformed record: {e}"),
            None,
        )
    })?;
    let mut session = s.session.write().map_err(|_| poisoned())?;
    let record = session.submit(&sub, Utc::now())?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn export(State(s): State<SharedState>) -> ApiResult<Response> {
    let rows = s.session.read().map_err(|_| poisoned())?.export();
    let mut buf = Vec::new();
    write_export_csv(&rows, &mut buf)?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], buf).into_response())
}

const IMAGE_TYPES: [(&str, &str); 5] = [
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
];

/// `id` may carry its own extension or be matched against the known ones.
fn find_image(dir: &Path, id: &str) -> Option<(PathBuf, &'static str)> {
    let safe = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !safe {
        return None;
    }
    let direct = dir.join(id);
    if direct.is_file() {
        let ext = direct.extension()?.to_str()?.to_ascii_lowercase();
        let mime = IMAGE_TYPES.iter().find(|(e, _)| *e == ext)?.1;
        return Some((direct, mime));
    }
    IMAGE_TYPES.iter().find_map(|(ext, mime)| {
        let p = dir.join(format!("{id}.{ext}"));
        p.is_file().then_some((p, *mime))
    })
}

async fn image(State(s): State<SharedState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("no image {id:?}"), None);
    let (path, mime) = find_image(&s.image_dir, &id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(Error::Io(e)))?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/instructions", get(instructions))
        .route("/tasks/next", get(next_task))
        .route("/ratings", post(submit))
        .route("/images/{id}", get(image))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(state)
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: SharedState,
) -> moral_align_core::Result<()> {
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Binds `cfg.listen` and serves until the process is stopped.
pub async fn serve(cfg: &ServiceConfig) -> moral_align_core::Result<()> {
    let state = Arc::new(AppState::open(cfg)?);
    serve_on(tokio::net::TcpListener::bind(cfg.listen).await?, state).await
}
