//! HTTP back end for human curation of augmented candidates.
//!
//! Reads are served from an in-memory snapshot of the manifest. Every
//! verdict goes through one async mutex, which rewrites the manifest
//! atomically, appends the audit line and then publishes the new snapshot.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::annotation::parse_labelme;
use crate::pipeline::manifest::{
    append_audit, read_manifest, write_manifest, AuditRecord, ManifestError,
};
use crate::pipeline::{ManifestEntry, Verdict};
use crate::raster::{render_overlay, ImageBuffer, Palette};

pub struct ReviewState {
    manifest: PathBuf,
    /// Directory that entry paths are relative to.
    root: PathBuf,
    snapshot: RwLock<Arc<Vec<ManifestEntry>>>,
    writer: tokio::sync::Mutex<()>,
}

impl ReviewState {
    pub fn open(manifest: &Path) -> Result<Self, ManifestError> {
        let entries = read_manifest(manifest)?;
        let root = manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok(Self {
            manifest: manifest.to_path_buf(),
            root,
            snapshot: RwLock::new(Arc::new(entries)),
            writer: tokio::sync::Mutex::new(()),
        })
    }

    pub fn snapshot(&self) -> Arc<Vec<ManifestEntry>> {
        self.snapshot
            .read()
            .expect("snapshot lock poisoned")
            .clone()
    }

    /// Records `decision` for entry `id` and returns the previous verdict.
    pub async fn set_verdict(
        &self,
        id: usize,
        decision: Verdict,
        note: Option<String>,
    ) -> Result<Verdict, ApiError> {
        let _guard = self.writer.lock().await;
        let mut entries = (*self.snapshot()).clone();
        let entry = entries.get_mut(id).ok_or(ApiError::UnknownId(id))?;
        let previous = entry.verdict;
        let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        entry.verdict = decision;
        entry.note = note.clone();
        entry.reviewed_at = Some(timestamp.clone());
        write_manifest(&self.manifest, &entries)?;
        append_audit(
            &self.manifest,
            &AuditRecord {
                id,
                previous,
                decision,
                note,
                timestamp,
            },
        )?;
        *self.snapshot.write().expect("snapshot lock poisoned") = Arc::new(entries);
        Ok(previous)
    }
}

#[derive(Debug)]
pub enum ApiError {
    UnknownId(usize),
    BadRequest(String),
    Internal(String),
}

impl From<ManifestError> for ApiError {
    fn from(e: ManifestError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::UnknownId(id) => (StatusCode::NOT_FOUND, format!("no candidate {id}")),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => {
                log::error!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub source: String,
    pub image: String,
    pub flags: Vec<String>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl From<&ManifestEntry> for Candidate {
    fn from(e: &ManifestEntry) -> Self {
        Self {
            id: e.id,
            source: e.source_image.clone(),
            image: e.image.clone(),
            flags: e.flags.clone(),
            verdict: e.verdict,
            note: e.note.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub pending: usize,
}

/// Image paths grouped by verdict, in manifest order.
pub fn export_summary(entries: &[ManifestEntry]) -> ExportSummary {
    let pick = |v: Verdict| {
        entries
            .iter()
            .filter(|e| e.verdict == v)
            .map(|e| e.image.clone())
            .collect::<Vec<_>>()
    };
    ExportSummary {
        accepted: pick(Verdict::Accepted),
        rejected: pick(Verdict::Rejected),
        pending: entries
            .iter()
            .filter(|e| e.verdict == Verdict::Pending)
            .count(),
    }
}

#[derive(Debug, Deserialize)]
struct CandidateQuery {
    status: Option<String>,
}

async fn list_candidates(
    State(state): State<Arc<ReviewState>>,
    Query(q): Query<CandidateQuery>,
) -> Result<Json<Vec<Candidate>>, ApiError> {
    let pending_only = match q.status.as_deref() {
        None | Some("pending") => true,
        Some("all") => false,
        Some(other) => {
            return Err(ApiError::BadRequest(format!(
                "status must be pending or all, got {other:?}"
            )))
        }
    };
    let snap = state.snapshot();
    Ok(Json(
        snap.iter()
            .filter(|e| !pending_only || e.verdict == Verdict::Pending)
            .map(Candidate::from)
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    #[serde(default)]
    overlay: bool,
}

fn overlay_png(root: &Path, entry: &ManifestEntry, bytes: &[u8]) -> Result<Vec<u8>, ApiError> {
    let img =
        ImageBuffer::decode(bytes, &entry.image).map_err(|e| ApiError::Internal(e.to_string()))?;
    let ann = root.join(&entry.annotation);
    let text = std::fs::read_to_string(&ann)
        .map_err(|e| ApiError::Internal(format!("cannot read {}: {e}", ann.display())))?;
    let doc = parse_labelme(&text).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(render_overlay(&img, &doc.shapes, &Palette::default()).encode_png())
}

async fn candidate_image(
    State(state): State<Arc<ReviewState>>,
    UrlPath(id): UrlPath<usize>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ApiError> {
    let snap = state.snapshot();
    let entry = snap.get(id).ok_or(ApiError::UnknownId(id))?;
    let path = state.root.join(&entry.image);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::Internal(format!("cannot read {}: {e}", path.display())))?;
    let body = if q.overlay {
        let root = state.root.clone();
        let entry = entry.clone();
        tokio::task::spawn_blocking(move || overlay_png(&root, &entry, &bytes))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))??
    } else {
        bytes
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(body)).into_response())
}

#[derive(Debug, Deserialize)]
struct VerdictBody {
    decision: String,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictReply {
    pub id: usize,
    pub decision: Verdict,
}

async fn post_verdict(
    State(state): State<Arc<ReviewState>>,
    UrlPath(id): UrlPath<usize>,
    body: axum::body::Bytes,
) -> Result<Json<VerdictReply>, ApiError> {
    let body: VerdictBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::BadRequest(format!("invalid verdict body: {e}")))?;
    let decision = match body.decision.as_str() {
        "accepted" => Verdict::Accepted,
        "rejected" => Verdict::Rejected,
        other => {
            return Err(ApiError::BadRequest(format!(
                "decision must be accepted or rejected, got {other:?}"
            )))
        }
    };
    state.set_verdict(id, decision, body.note).await?;
    Ok(Json(VerdictReply { id, decision }))
}

async fn export(State(state): State<Arc<ReviewState>>) -> Json<ExportSummary> {
    Json(export_summary(&state.snapshot()))
}

const PLACEHOLDER_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>docwarp review</title></head>\n<body><h1>docwarp review</h1>\n<p>No UI bundle was given (start with <code>--ui-dir</code>). The API is live:</p>\n<ul><li><a href=\"/api/candidates?status=all\">/api/candidates</a></li><li><a href=\"/api/export\">/api/export</a></li></ul>\n</body></html>\n";

/// REST routes plus the review UI: static files from `ui_dir` when given,
/// otherwise a placeholder page at `/`.
pub fn router(state: Arc<ReviewState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/candidates", get(list_candidates))
        .route("/api/candidates/{id}/image", get(candidate_image))
        .route("/api/candidates/{id}/verdict", post(post_verdict))
        .route("/api/export", get(export))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_PAGE) })),
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(
    state: Arc<ReviewState>,
    addr: SocketAddr,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state, ui_dir).await
}

/// Serves on an already bound listener.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<ReviewState>,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    log::info!(
        "review server listening on http://{}",
        listener.local_addr()?
    );
    axum::serve(listener, router(state, ui_dir.as_deref())).await
}
