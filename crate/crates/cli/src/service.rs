use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iris_gate::cascade::{assess, CascadeError, Tier, Verdict};
use iris_gate::imaging::{decode_image, standardize, ImagingError};
use serde::Serialize;
use serde_json::json;

use crate::config::ServiceConfig;
use crate::models::{common_side, load_tier, LoadedDetector};

/// Immutable state shared by all requests.
#[derive(Debug, Clone)]
pub struct AppState {
    pub tier1: LoadedDetector,
    pub tier2: LoadedDetector,
    pub target_side: u32,
    pub max_upload_bytes: usize,
}

impl AppState {
    pub fn new(
        tier1: LoadedDetector,
        tier2: LoadedDetector,
        target_side: u32,
        max_upload_bytes: usize,
    ) -> anyhow::Result<Self> {
        let target_side = common_side(&tier1, &tier2, target_side)?;
        Ok(Self {
            tier1,
            tier2,
            target_side,
            max_upload_bytes,
        })
    }

    /// Loads both tiers; any failure aborts startup.
    pub fn from_config(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        let tier1 = load_tier(&cfg.tier1).context("tier1")?;
        let tier2 = load_tier(&cfg.tier2).context("tier2")?;
        let state = Self::new(tier1, tier2, cfg.target_side, cfg.max_upload_bytes)?;
        if state.target_side != cfg.target_side {
            anyhow::bail!(
                "target_side {} does not match the models' input side {}",
                cfg.target_side,
                state.target_side
            );
        }
        Ok(state)
    }

    /// Decodes, standardizes and runs the cascade on one image.
    pub fn assess_bytes(&self, bytes: &[u8]) -> Result<Verdict, ServiceError> {
        if bytes.is_empty() {
            return Err(ServiceError::malformed("request body is empty"));
        }
        let img = decode_image(bytes).map_err(ServiceError::from_imaging)?;
        let t = standardize(&img, self.target_side).map_err(ServiceError::from_imaging)?;
        assess(&t, &*self.tier1.detector, &*self.tier2.detector).map_err(ServiceError::from_cascade)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub tier: Option<Tier>,
}

impl ServiceError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            tier: None,
        }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_image", message)
    }

    fn from_imaging(e: ImagingError) -> Self {
        match e {
            ImagingError::UnsupportedFormat(_) => Self::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_format",
                e.to_string(),
            ),
            _ => Self::malformed(e.to_string()),
        }
    }

    fn from_cascade(e: CascadeError) -> Self {
        Self {
            tier: e.tier(),
            ..Self::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "detector_failure",
                e.to_string(),
            )
        }
    }

    fn into_response(self, request_id: &str) -> Response {
        let mut body = json!({
            "error": self.code,
            "message": self.message,
            "request_id": request_id,
        });
        if let Some(tier) = self.tier {
            body["tier"] = json!(tier);
        }
        with_request_id((self.status, Json(body)).into_response(), request_id)
    }
}

#[derive(Serialize)]
struct AssessResponse {
    request_id: String,
    processing_ms: u64,
    #[serde(flatten)]
    verdict: Verdict,
}

fn with_request_id(mut r: Response, request_id: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(request_id) {
        r.headers_mut().insert("x-request-id", v);
    }
    r
}

fn accepted_type(headers: &HeaderMap) -> bool {
    let Some(ct) = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
    else {
        return false;
    };
    let mime = ct
        .split(';')
        .next()
        .unwrap_or("")
        .trim()
        .to_ascii_lowercase();
    matches!(mime.as_str(), "image/png" | "image/jpeg" | "image/jpg")
}

async fn assess_handler(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Response {
    let started = Instant::now();
    let request_id = uuid::Uuid::new_v4().to_string();
    let body = match body {
        Ok(b) => b,
        Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => {
            let limit = state.max_upload_bytes;
            return ServiceError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "too_large",
                format!("body exceeds {limit} bytes"),
            )
            .into_response(&request_id);
        }
        Err(e) => return ServiceError::malformed(e.body_text()).into_response(&request_id),
    };
    if body.is_empty() {
        return ServiceError::malformed("request body is empty").into_response(&request_id);
    }
    if !accepted_type(&headers) {
        return ServiceError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_format",
            "content-type must be image/png or image/jpeg",
        )
        .into_response(&request_id);
    }
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || worker.assess_bytes(&body))
        .await
        .unwrap_or_else(|e| {
            Err(ServiceError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal",
                e.to_string(),
            ))
        });
    let processing_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok(verdict) => {
            tracing::info!(%request_id, processing_ms, code = ?verdict.feedback_code, "assessed");
            let body = AssessResponse {
                request_id: request_id.clone(),
                processing_ms,
                verdict,
            };
            with_request_id(Json(body).into_response(), &request_id)
        }
        Err(e) => {
            tracing::warn!(%request_id, status = %e.status, message = %e.message, "rejected");
            e.into_response(&request_id)
        }
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "target_side": state.target_side,
        "max_upload_bytes": state.max_upload_bytes,
        "tiers": {
            "eye_presence": state.tier1.info(),
            "lighting": state.tier2.info(),
        },
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/assess", post(assess_handler))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Loads the models, then binds and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("cannot bind {}", cfg.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
