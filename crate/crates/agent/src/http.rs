//! Management HTTP API. Every handler calls the same node operations as the
//! control socket.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use nefele_core::{Npid, SpawnRequest};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use uuid::Uuid;

use crate::node::Node;
use crate::proto::{ErrorCode, Scope};

/// Set to "true" on /v1/processes when some member did not answer.
pub const PARTIAL_HEADER: &str = "x-nefele-partial";

type Shared = State<Arc<Node>>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/v1/nodes", get(nodes))
        .route("/v1/processes", get(processes))
        .route("/v1/processes/:npid", delete(kill))
        .route("/v1/spawn", post(spawn))
        .route("/v1/requests/:id", get(request))
        .route("/v1/logs/:npid", get(logs))
        .route("/v1/names", get(names))
        .with_state(node)
}

pub async fn serve(node: Arc<Node>, listener: TcpListener) {
    let mut shutdown = node.shutdown.subscribe();
    let app = router(node);
    let _ = axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = shutdown.changed().await;
        })
        .await;
}

async fn nodes(State(node): Shared) -> Response {
    Json(node.nodes()).into_response()
}

#[derive(Deserialize)]
struct PsQuery {
    #[serde(default)]
    scope: Scope,
    tenant: Option<String>,
}

async fn processes(State(node): Shared, Query(q): Query<PsQuery>) -> Response {
    let listing = node.ps(q.scope, q.tenant).await;
    let mut resp = Json(listing.processes).into_response();
    if listing.partial {
        resp.headers_mut().insert(PARTIAL_HEADER, HeaderValue::from_static("true"));
    }
    resp
}

async fn spawn(State(node): Shared, body: Bytes) -> Response {
    let req: SpawnRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    match node.submit(req) {
        Ok(st) => (StatusCode::ACCEPTED, Json(json!({ "request_id": st.request_id }))).into_response(),
        Err(r) => error(StatusCode::BAD_REQUEST, r.to_string()),
    }
}

async fn request(State(node): Shared, Path(id): Path<String>) -> Response {
    let Ok(id) = id.parse::<Uuid>() else { return error(StatusCode::BAD_REQUEST, "malformed request id") };
    match node.request_status(&id) {
        Some(st) => Json(st).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no request {id}")),
    }
}

#[derive(Deserialize)]
struct KillQuery {
    signal: Option<i32>,
}

async fn kill(State(node): Shared, Path(npid): Path<String>, Query(q): Query<KillQuery>) -> Response {
    let Ok(npid) = npid.parse::<Npid>() else { return error(StatusCode::BAD_REQUEST, "malformed npid") };
    let signal = q.signal.unwrap_or(15);
    match node.signal(npid, signal).await {
        Ok(()) => Json(json!({ "ok": true })).into_response(),
        Err(ErrorCode::NoSuchProcess) => error(StatusCode::NOT_FOUND, format!("no such process {npid}")),
        Err(ErrorCode::BadRequest) => error(StatusCode::BAD_REQUEST, format!("invalid signal {signal}")),
        Err(ErrorCode::Unreachable) => error(StatusCode::BAD_GATEWAY, format!("owner of {npid} is unreachable")),
        Err(code) => error(StatusCode::INTERNAL_SERVER_ERROR, code.to_string()),
    }
}

#[derive(Deserialize)]
struct LogsQuery {
    #[serde(default)]
    follow: bool,
    last_n: Option<usize>,
}

async fn logs(State(node): Shared, Path(npid): Path<String>, Query(q): Query<LogsQuery>) -> Response {
    let Ok(npid) = npid.parse::<Npid>() else { return error(StatusCode::BAD_REQUEST, "malformed npid") };
    let rx = node.logs(npid, q.follow, q.last_n).await;
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let rec = rx.recv().await?;
        let mut line = serde_json::to_vec(&rec).unwrap_or_default();
        line.push(b'\n');
        Some((Ok::<_, std::convert::Infallible>(Bytes::from(line)), rx))
    });
    let mut resp = Response::new(Body::from_stream(stream));
    resp.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    resp
}

#[derive(Deserialize)]
struct NamesQuery {
    tenant: Option<String>,
}

async fn names(State(node): Shared, Query(q): Query<NamesQuery>) -> Response {
    Json(node.names(q.tenant.as_deref())).into_response()
}
