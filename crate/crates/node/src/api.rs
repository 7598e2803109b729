//! Local HTTP API for the user interface and scripts.
//!
//! | route                  | body / query      | answer                          |
//! |------------------------|-------------------|---------------------------------|
//! | `POST /search`         | `{"q": "..."}`    | results and the decision        |
//! | `GET /status`          |                   | view, table, pending, degraded  |
//! | `GET /config`          |                   | sensitivity settings and topics |
//! | `PUT /config/topics`   | `["health", ...]` | the updated config              |
//! | `GET /decisions/recent`| `?n=20`           | newest decisions, newest last   |
//!
//! Bodies that are not the expected JSON get 400. Searching before the node
//! has peers and fake queries gets 503.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use decoy_core::{Error, RelayNode, Transport};
use serde::{Deserialize, Serialize};
use serde_json::json;

const RECENT_DEFAULT: usize = 20;

#[derive(Clone)]
pub struct ApiState {
    pub node: Arc<RelayNode>,
    pub transport: Arc<dyn Transport>,
}

#[derive(Debug, Deserialize)]
struct SearchRequest {
    q: String,
}

#[derive(Debug, Deserialize)]
struct RecentQuery {
    n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigView {
    pub k_max: usize,
    pub alpha: f64,
    pub view_size: usize,
    pub deadline_ms: u64,
    pub enabled_topics: BTreeSet<String>,
    pub available_topics: Vec<String>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyQuery => StatusCode::BAD_REQUEST,
            Error::NotBootstrapped(_) | Error::NoPeers | Error::NoEligibleRelay | Error::EmptyFakeTable => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            Error::RealPathFailed(_) | Error::Timeout(_) | Error::Transport { .. } | Error::Backend(_) => {
                StatusCode::BAD_GATEWAY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed JSON: {e}")))
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/status", get(status))
        .route("/config", get(config))
        .route("/config/topics", put(set_topics))
        .route("/decisions/recent", get(recent))
        .with_state(state)
}

async fn search(State(s): State<ApiState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SearchRequest = parse(&body)?;
    if !s.node.is_bootstrapped() {
        return Err(Error::NotBootstrapped("view or fake table empty").into());
    }
    let outcome = tokio::task::spawn_blocking(move || s.node.submit_query(&req.q, s.transport.as_ref()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(outcome).into_response())
}

async fn status(State(s): State<ApiState>) -> Response {
    Json(s.node.status()).into_response()
}

fn config_view(node: &RelayNode) -> ConfigView {
    let settings = node.settings();
    ConfigView {
        k_max: settings.sensitivity.k_max,
        alpha: settings.sensitivity.smoothing_alpha,
        view_size: settings.view_size,
        deadline_ms: settings.deadline_ms,
        enabled_topics: settings.sensitivity.enabled_topics,
        available_topics: node.available_topics(),
    }
}

async fn config(State(s): State<ApiState>) -> Json<ConfigView> {
    Json(config_view(&s.node))
}

async fn set_topics(State(s): State<ApiState>, body: Bytes) -> Result<Json<ConfigView>, ApiError> {
    let topics: BTreeSet<String> = parse(&body)?;
    let available = s.node.available_topics();
    if let Some(t) = topics.iter().find(|t| !available.contains(t)) {
        return Err(bad_request(format!("unknown topic {t}; available: {}", available.join(", "))));
    }
    s.node.set_enabled_topics(topics);
    Ok(Json(config_view(&s.node)))
}

async fn recent(State(s): State<ApiState>, Query(q): Query<RecentQuery>) -> Response {
    Json(s.node.recent_decisions(q.n.unwrap_or(RECENT_DEFAULT))).into_response()
}
