//! HTTP scoring service: one immutable model shared by all requests.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use memscore::image::{decode_image, ImageTensor};
use memscore::scoring::{Scorer, ScoringModel};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const DEFAULT_MAX_IMAGE_BYTES: usize = 10 * 1024 * 1024;
pub const DEFAULT_MAX_BATCH_IMAGES: usize = 64;
pub const DEFAULT_MAX_BATCH_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Limit on a single image, raw or as one multipart part.
    pub max_image_bytes: usize,
    pub max_batch_images: usize,
    /// Limit on a whole batch request body.
    pub max_batch_bytes: usize,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_image_bytes: DEFAULT_MAX_IMAGE_BYTES,
            max_batch_images: DEFAULT_MAX_BATCH_IMAGES,
            max_batch_bytes: DEFAULT_MAX_BATCH_BYTES,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub model_tag: String,
    pub pipeline_tag: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_tag: String,
    pub pipeline_tag: String,
    pub uptime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Deserialize)]
pub struct ScoreQuery {
    /// If given, must name the loaded model.
    pub model: Option<String>,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    TooLarge(String),
    UnknownModel(String),
    /// Logged in full, reported opaquely.
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::TooLarge(m) => (StatusCode::PAYLOAD_TOO_LARGE, m),
            ApiError::UnknownModel(tag) => {
                (StatusCode::NOT_FOUND, format!("model `{tag}` is not loaded"))
            }
            ApiError::Internal(detail) => {
                log::error!("internal error: {detail}");
                (StatusCode::INTERNAL_SERVER_ERROR, "internal error".to_string())
            }
        };
        (status, Json(ErrorBody { error: message })).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<ScoringModel>,
    started: Instant,
    cfg: Arc<ServiceConfig>,
}

pub fn router(model: Arc<ScoringModel>, cfg: ServiceConfig) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let cors = if cfg.cors_origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = cfg
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        cors.allow_origin(AllowOrigin::list(origins))
    };
    let state = AppState {
        model,
        started: Instant::now(),
        cfg: Arc::new(cfg.clone()),
    };
    Router::new()
        .route(
            "/score",
            post(score_one).layer(DefaultBodyLimit::max(cfg.max_image_bytes)),
        )
        .route(
            "/score/batch",
            post(score_batch).layer(DefaultBodyLimit::max(cfg.max_batch_bytes)),
        )
        .route("/healthz", get(healthz))
        .layer(cors)
        .with_state(state)
}

/// Bind `addr` and serve until Ctrl-C.
pub async fn serve(model: ScoringModel, cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, Arc::new(model), cfg).await
}

/// Serve on an already bound listener until Ctrl-C.
pub async fn serve_listener(
    listener: tokio::net::TcpListener,
    model: Arc<ScoringModel>,
    cfg: ServiceConfig,
) -> std::io::Result<()> {
    log::info!(
        "serving {} ({}) on {}",
        model.model_tag(),
        model.pipeline_tag(),
        listener.local_addr()?
    );
    axum::serve(listener, router(model, cfg))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_tag: s.model.model_tag().to_string(),
        pipeline_tag: s.model.pipeline_tag().to_string(),
        uptime_s: s.started.elapsed().as_secs_f64(),
    })
}

fn check_model(s: &AppState, q: &ScoreQuery) -> Result<(), ApiError> {
    match &q.model {
        Some(tag) if tag != s.model.model_tag() => Err(ApiError::UnknownModel(tag.clone())),
        _ => Ok(()),
    }
}

fn is_multipart(req: &Request) -> bool {
    req.headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

/// Every non-empty part of a multipart body, each within the image limit.
async fn multipart_images(
    mut mp: Multipart,
    max_image_bytes: usize,
) -> Result<Vec<Bytes>, ApiError> {
    let mut out = Vec::new();
    loop {
        let field = match mp.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(multipart_error(e)),
        };
        let data = field.bytes().await.map_err(multipart_error)?;
        if data.is_empty() {
            continue;
        }
        if data.len() > max_image_bytes {
            return Err(ApiError::TooLarge(format!(
                "image exceeds {max_image_bytes} bytes"
            )));
        }
        out.push(data);
    }
    Ok(out)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::TooLarge("request body too large".into())
    } else {
        ApiError::BadRequest(format!("bad multipart body: {}", e.body_text()))
    }
}

fn decode_all(images: &[Bytes]) -> Result<Vec<ImageTensor>, ApiError> {
    images
        .iter()
        .enumerate()
        .map(|(i, b)| {
            decode_image(b).map_err(|e| {
                if images.len() == 1 {
                    ApiError::BadRequest(e.to_string())
                } else {
                    ApiError::BadRequest(format!("image {i}: {e}"))
                }
            })
        })
        .collect()
}

/// Score on the blocking pool; the model is shared read-only.
async fn run_scoring(s: &AppState, images: Vec<ImageTensor>) -> Result<Vec<ScoreResponse>, ApiError> {
    let model = Arc::clone(&s.model);
    let start = Instant::now();
    let scores = tokio::task::spawn_blocking(move || model.score_batch(&images))
        .await
        .map_err(|e| ApiError::Internal(format!("scoring task failed: {e}")))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(scores
        .into_iter()
        .map(|score| ScoreResponse {
            score,
            model_tag: s.model.model_tag().to_string(),
            pipeline_tag: s.model.pipeline_tag().to_string(),
            elapsed_ms,
        })
        .collect())
}

async fn score_one(
    State(s): State<AppState>,
    Query(q): Query<ScoreQuery>,
    req: Request,
) -> Result<Json<ScoreResponse>, ApiError> {
    check_model(&s, &q)?;
    let body = if is_multipart(&req) {
        let mp = Multipart::from_request(req, &s)
            .await
            .map_err(|e| ApiError::BadRequest(e.body_text()))?;
        let mut parts = multipart_images(mp, s.cfg.max_image_bytes).await?;
        if parts.len() > 1 {
            return Err(ApiError::BadRequest(
                "send one image per request or use /score/batch".into(),
            ));
        }
        parts
            .pop()
            .ok_or_else(|| ApiError::BadRequest("no image in request".into()))?
    } else {
        Bytes::from_request(req, &s).await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::TooLarge(format!("image exceeds {} bytes", s.cfg.max_image_bytes))
            } else {
                ApiError::BadRequest(e.body_text())
            }
        })?
    };
    if body.is_empty() {
        return Err(ApiError::BadRequest("empty request body".into()));
    }
    let images = decode_all(std::slice::from_ref(&body))?;
    let mut out = run_scoring(&s, images).await?;
    Ok(Json(out.remove(0)))
}

async fn score_batch(
    State(s): State<AppState>,
    Query(q): Query<ScoreQuery>,
    req: Request,
) -> Result<Json<Vec<ScoreResponse>>, ApiError> {
    check_model(&s, &q)?;
    if !is_multipart(&req) {
        return Err(ApiError::BadRequest(
            "batch requests must be multipart/form-data".into(),
        ));
    }
    let mp = Multipart::from_request(req, &s)
        .await
        .map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let parts = multipart_images(mp, s.cfg.max_image_bytes).await?;
    if parts.is_empty() {
        return Err(ApiError::BadRequest("no images in request".into()));
    }
    if parts.len() > s.cfg.max_batch_images {
        return Err(ApiError::TooLarge(format!(
            "batch of {} exceeds {} images",
            parts.len(),
            s.cfg.max_batch_images
        )));
    }
    let images = decode_all(&parts)?;
    Ok(Json(run_scoring(&s, images).await?))
}
