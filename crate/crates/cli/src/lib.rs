//! HTTP front end for the rewrite service, plus file helpers shared by the
//! `mine`, `sim` and `serve` binaries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reformulator::RewriteService;
use serde::{Deserialize, Serialize};

pub const PORT_ENV: &str = "REWRITE_PORT";

pub struct AppState {
    pub service: RewriteService,
    pub table_path: PathBuf,
}

#[derive(Debug, Deserialize)]
pub struct RewriteQuery {
    pub u: String,
}

#[derive(Debug, Deserialize)]
pub struct ReloadQuery {
    /// Defaults to the path the server was started with.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct ToggleQuery {
    pub enabled: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AdminResponse {
    pub table_version: String,
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

fn admin(state: &AppState, error: Option<String>) -> AdminResponse {
    AdminResponse {
        table_version: state.service.version(),
        enabled: state.service.is_enabled(),
        error,
    }
}

async fn rewrite(State(state): State<Arc<AppState>>, Query(q): Query<RewriteQuery>) -> Response {
    Json(state.service.lookup_raw(&q.u)).into_response()
}

async fn reload(State(state): State<Arc<AppState>>, Query(q): Query<ReloadQuery>) -> Response {
    let path = q.path.unwrap_or_else(|| state.table_path.clone());
    // parsing a large table is blocking work
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || worker.service.reload(&path)).await;
    match result {
        Ok(Ok(_)) => Json(admin(&state, None)).into_response(),
        Ok(Err(e)) => (StatusCode::UNPROCESSABLE_ENTITY, Json(admin(&state, Some(e.to_string())))).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(admin(&state, Some(e.to_string())))).into_response(),
    }
}

async fn toggle(State(state): State<Arc<AppState>>, Query(q): Query<ToggleQuery>) -> Response {
    state.service.set_enabled(q.enabled);
    Json(admin(&state, None)).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(admin(&state, None)).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/rewrite", get(rewrite))
        .route("/admin/reload", post(reload))
        .route("/admin/toggle", post(toggle))
        .route("/health", get(health))
        .with_state(state)
}

pub fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(file))
}

/// Writes through a buffered file, flushing before returning.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut out = BufWriter::new(file);
    f(&mut out).with_context(|| format!("cannot write {}", path.display()))?;
    out.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}
