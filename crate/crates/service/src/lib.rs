//! HTTP front end for labeling sessions.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/sessions` | `{domain, participant, seed}` |
//! | GET | `/sessions/{id}/next` | |
//! | POST | `/sessions/{id}/pretest` | `{answers: {fact: bool}}` |
//! | POST | `/sessions/{id}/labels` | `{index, label}` |
//! | GET | `/sessions/{id}/export` | JSONL |
//! | GET | `/export` | `?domain=..&filter=firsttrace`, JSONL |

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use explicable::harness::{write_dataset_to, Dataset};
use explicable::label_service::{
    ExportFilter, LabelAck, NextPayload, PretestRecord, SessionError, SessionStore, Status,
};
use explicable::Error;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub domain: String,
    pub participant: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub id: String,
    pub domain: String,
    pub participant: String,
    pub seed: u64,
    pub n_traces: usize,
    pub n_transitions: usize,
    pub status: Status,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostLabel {
    pub index: usize,
    pub label: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostPretest {
    pub answers: BTreeMap<String, bool>,
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default = "default_domain")]
    pub domain: String,
    #[serde(default)]
    pub filter: Option<String>,
}

fn default_domain() -> String {
    "warehouse".into()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::Session(e) => match e {
                SessionError::UnknownSession(_) | SessionError::UnknownDomain(_) => StatusCode::NOT_FOUND,
                SessionError::Conflict { .. } | SessionError::Relabel(_) | SessionError::Finished => {
                    StatusCode::CONFLICT
                }
                SessionError::InvalidLabel(_) | SessionError::BadRequest(_) => StatusCode::UNPROCESSABLE_ENTITY,
                SessionError::PretestRequired => StatusCode::FORBIDDEN,
            },
            _ => {
                log::error!("request failed: {}", self.0);
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (
            status,
            Json(ErrorBody {
                error: self.0.to_string(),
            }),
        )
            .into_response()
    }
}

type Store = Arc<SessionStore>;

/// Runs store work off the async executor.
async fn blocking<T, F>(store: &Store, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&SessionStore) -> explicable::Result<T> + Send + 'static,
{
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError(Error::Config(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

async fn create(
    State(store): State<Store>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionInfo>), ApiError> {
    let s = blocking(&store, move |st| {
        st.create_session(&req.domain, &req.participant, req.seed)
    })
    .await?;
    let info = SessionInfo {
        n_traces: s.plan.len(),
        n_transitions: s.n_transitions(),
        status: s.status(),
        id: s.id,
        domain: s.domain,
        participant: s.participant,
        seed: s.seed,
    };
    Ok((StatusCode::CREATED, Json(info)))
}

async fn next(State(store): State<Store>, UrlPath(id): UrlPath<String>) -> Result<Json<NextPayload>, ApiError> {
    Ok(Json(blocking(&store, move |st| st.next(&id)).await?))
}

async fn pretest(
    State(store): State<Store>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PostPretest>,
) -> Result<Json<PretestRecord>, ApiError> {
    Ok(Json(
        blocking(&store, move |st| st.submit_pretest(&id, req.answers)).await?,
    ))
}

async fn label(
    State(store): State<Store>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PostLabel>,
) -> Result<Json<LabelAck>, ApiError> {
    Ok(Json(
        blocking(&store, move |st| st.post_label(&id, req.index, req.label)).await?,
    ))
}

fn jsonl(data: &Dataset) -> Result<Response, ApiError> {
    let mut body = Vec::new();
    write_dataset_to(&mut body, data)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn export_session(State(store): State<Store>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    jsonl(&blocking(&store, move |st| st.export_session(&id)).await?)
}

async fn export(State(store): State<Store>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let filter = match q.filter.as_deref() {
        None | Some("") | Some("none") => ExportFilter::None,
        Some("firsttrace") => ExportFilter::FirstTrace,
        Some(other) => {
            return Err(ApiError(
                SessionError::BadRequest(format!("unknown filter `{other}`")).into(),
            ))
        }
    };
    jsonl(&blocking(&store, move |st| st.export_study(&q.domain, filter)).await?)
}

async fn health() -> &'static str {
    "ok"
}

/// Router over a store. `origin` restricts CORS to one UI origin; `None`
/// allows any.
pub fn router(store: Arc<SessionStore>, origin: Option<HeaderValue>) -> Router {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/pretest", post(pretest))
        .route("/sessions/{id}/labels", post(label))
        .route("/sessions/{id}/export", get(export_session))
        .route("/export", get(export))
        .layer(cors)
        .with_state(store)
}

/// Serves until the process is stopped.
pub async fn serve(dir: impl AsRef<Path>, addr: SocketAddr, origin: Option<HeaderValue>) -> explicable::Result<()> {
    let store = Arc::new(SessionStore::open(dir)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("label service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store, origin)).await?;
    Ok(())
}
