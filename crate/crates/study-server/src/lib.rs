//! HTTP front end of the reader-study store.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /sessions` | assemble a session from stored image sets |
//! | `GET /sessions/{id}/next?reader=` | next unanswered item for a reader |
//! | `POST /sessions/{id}/responses` | record a real/fake answer |
//! | `GET /sessions/{id}/report?unblind=` | confusion tables and kappa |
//!
//! Anything else is served from the optional static directory. Images are
//! sent as base64-encoded 16-bit binary PGM. Reader-facing bodies never
//! mention source groups.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use genforge::data::{encode_pgm16, load_set, ImageSet};
use genforge::study::{Label, SessionStore, SourceGroup, StudyReport, DEFAULT_N_PER_GROUP};
use genforge::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "GENFORGE_PORT";
pub const DATA_DIR_ENV: &str = "GENFORGE_DATA_DIR";
pub const UI_DIR_ENV: &str = "GENFORGE_UI_DIR";
pub const DEFAULT_DATA_DIR: &str = "genforge-data";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerConfig {
    pub port: u16,
    pub data_dir: PathBuf,
    /// Directory served for every path the API does not claim.
    pub static_dir: Option<PathBuf>,
}

impl ServerConfig {
    /// Reads `GENFORGE_PORT`, `GENFORGE_DATA_DIR` and `GENFORGE_UI_DIR`,
    /// falling back to defaults when unset.
    pub fn from_env() -> Result<Self, String> {
        let port = match std::env::var(PORT_ENV) {
            Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}={v:?} is not a port number"))?,
            Err(_) => DEFAULT_PORT,
        };
        let data_dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from);
        let static_dir = std::env::var_os(UI_DIR_ENV).map(PathBuf::from);
        Ok(Self { port, data_dir, static_dir })
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
}

/// An error rendered as `{"error": {"kind", "message"}}`.
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) | Error::InvalidState(_) => StatusCode::CONFLICT,
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let body = json!({ "error": { "kind": self.0.kind(), "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> genforge::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::InvalidState(format!("worker failed: {e}")))),
    }
}

/// Body of `POST /sessions`. Paths point at `.imgset` files or PGM
/// directories; relative paths resolve against the data directory.
#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub real: PathBuf,
    #[serde(default)]
    pub fakes: BTreeMap<SourceGroup, PathBuf>,
    #[serde(default = "default_n_per_group")]
    pub n_per_group: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_per_group() -> usize {
    DEFAULT_N_PER_GROUP
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub n_items: usize,
}

#[derive(Debug, Deserialize)]
pub struct ReaderQuery {
    pub reader: String,
}

#[derive(Debug, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub unblind: bool,
}

#[derive(Debug, Deserialize)]
pub struct SubmitResponse {
    pub reader_id: String,
    pub item_id: String,
    pub label: Label,
    #[serde(default)]
    pub overwrite: bool,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

async fn create(State(st): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Created>)> {
    let store = st.store.clone();
    let created = blocking(move || {
        let root = store.root().to_path_buf();
        let real: ImageSet<f64> = load_set(resolve(&root, &req.real))?;
        let mut fakes = BTreeMap::new();
        for (g, p) in &req.fakes {
            fakes.insert(*g, load_set::<f64>(resolve(&root, p))?);
        }
        let id = store.create(&real, &fakes, req.n_per_group, req.seed)?;
        let n_items = store.with_session(&id, |s| s.len())?;
        Ok(Created { session_id: id, n_items })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReaderQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    if q.reader.trim().is_empty() {
        return Err(Error::InvalidInput("reader must not be empty".into()).into());
    }
    let store = st.store.clone();
    let (item, progress) = blocking(move || store.next_item(&id, &q.reader)).await?;
    let body = match item {
        Some(it) => {
            let pgm = encode_pgm16(&it.pixels, it.height, it.width)?;
            json!({
                "done": false,
                "item_id": it.item_id,
                "image": base64::engine::general_purpose::STANDARD.encode(pgm),
                "image_format": "pgm16",
                "height": it.height,
                "width": it.width,
                "progress": progress,
            })
        }
        None => json!({ "done": true, "progress": progress }),
    };
    Ok(Json(body))
}

async fn respond(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SubmitResponse>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let store = st.store.clone();
    let (r, progress) =
        blocking(move || store.record_response(&id, &req.reader_id, &req.item_id, req.label, req.overwrite)).await?;
    let body = json!({
        "reader_id": r.reader_id,
        "item_id": r.item_id,
        "label": r.label,
        "timestamp": r.timestamp,
        "progress": progress,
    });
    Ok((StatusCode::CREATED, Json(body)))
}

async fn report(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Json<StudyReport>> {
    let store = st.store.clone();
    Ok(Json(blocking(move || store.report(&id, q.unblind)).await?))
}

/// The API routes, plus static files when `static_dir` is given.
pub fn router(store: Arc<SessionStore>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/responses", post(respond))
        .route("/sessions/{id}/report", get(report))
        .with_state(AppState { store });
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Opens the store, binds `127.0.0.1:port` and serves until Ctrl-C.
pub async fn run(config: ServerConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let store = Arc::new(SessionStore::open(&config.data_dir)?);
    let app = router(store, config.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.port)).await?;
    eprintln!("study service listening on http://{}", listener.local_addr()?);
    serve(listener, app, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
