use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::engine::{ChatRequest, Engine};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 8 * 1024;

pub struct AppState {
    engine: Engine,
    started: Instant,
    /// BLEU of the last recorded evaluation of this checkpoint, if any.
    bleu: Option<f64>,
    requests: AtomicU64,
    failures: AtomicU64,
}

impl AppState {
    pub fn new(engine: Engine, bleu: Option<f64>) -> Self {
        AppState {
            engine,
            started: Instant::now(),
            bleu,
            requests: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }
}

fn error(status: StatusCode, body: serde_json::Value) -> Response {
    (status, Json(body)).into_response()
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let n = state.requests.fetch_add(1, Ordering::Relaxed) + 1;
    let request: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, json!({ "error": format!("invalid request: {e}") })),
    };
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || worker.engine.answer(&request)).await;
    match result {
        Ok(Ok(response)) => {
            tracing::info!(
                request = n,
                latency_ms = format_args!("{:.2}", response.latency_ms),
                tokens = response.token_ids.len(),
                "chat"
            );
            Json(response).into_response()
        }
        failed => {
            let id = format!("{:08x}", n ^ 0x5eed_c4a7);
            state.failures.fetch_add(1, Ordering::Relaxed);
            match failed {
                Ok(Err(e)) => tracing::error!(request = n, error_id = %id, "decode failed: {e:#}"),
                Err(e) => tracing::error!(request = n, error_id = %id, "decode task failed: {e}"),
                Ok(Ok(_)) => unreachable!(),
            }
            error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id }))
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model": state.engine.tag(),
        "uptime_s": state.started.elapsed().as_secs_f64(),
    }))
}

async fn info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let e = &state.engine;
    Json(json!({
        "model": e.tag(),
        "family": e.config().family(),
        "summary": e.config().summary(),
        "config": e.config(),
        "dtype": format!("{:?}", e.dtype()).to_lowercase(),
        "vocab_size": e.vocab_size(),
        "bleu": state.bleu,
        "requests": state.requests.load(Ordering::Relaxed),
        "failures": state.failures.load(Ordering::Relaxed),
    }))
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/chat", post(chat))
        .route("/health", get(health))
        .route("/info", get(info))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds, announces the bound address on stdout, and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, bind: SocketAddr, ui_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    tracing::info!(model = state.engine.tag(), %addr, "serving");
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
