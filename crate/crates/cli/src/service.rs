//! HTTP inference service: invert an uploaded image into a session, then
//! render direction edits from the stored codes.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tch::{Kind, Tensor};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use styleres::checkpoint::CheckpointBundle;
use styleres::editops::{apply_edit, parse_layer_spec, DirectionBank, EditSpec, DEFAULT_BETA};
use styleres::models::Models;
use styleres::shapesdata::{decode_image, png_bytes, ImageBatch};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    pub max_upload_bytes: usize,
    /// Requests allowed to wait for the model at once; more get 503.
    pub queue_capacity: usize,
    pub cors_origin: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(30 * 60),
            max_sessions: 256,
            max_upload_bytes: 4 << 20,
            queue_capacity: 32,
            cors_origin: None,
            static_dir: None,
        }
    }
}

/// Networks used for inference. Without residual encoders in the
/// checkpoint the service falls back to plain W+ inversion.
pub struct LoadedModel {
    models: Models,
    pub checkpoint_hash: String,
    pub resolution: usize,
}

impl LoadedModel {
    pub fn load(path: &Path) -> styleres::Result<Self> {
        Self::from_bundle(&CheckpointBundle::load(path)?)
    }

    pub fn from_bundle(bundle: &CheckpointBundle) -> styleres::Result<Self> {
        let models = Models::from_bundle(bundle)?;
        models.generator()?;
        models.base_encoder()?;
        Ok(Self {
            resolution: models.config.resolution(),
            checkpoint_hash: bundle.manifest_hash()?,
            models,
        })
    }

    fn render(&self, f0: &Tensor, wplus: &Tensor, w_edit: &Tensor) -> styleres::Result<Tensor> {
        let p = self.models.pipeline(self.models.res.is_some())?;
        tch::no_grad(|| Ok(p.from_codes(f0, wplus, w_edit)?.image))
    }
}

struct Session {
    f0: Tensor,
    wplus: Tensor,
    last_used: Instant,
}

pub struct AppState {
    model: Option<Mutex<LoadedModel>>,
    checkpoint_hash: Option<String>,
    bank: DirectionBank,
    sessions: Mutex<LruCache<String, Session>>,
    queue: Arc<Semaphore>,
    cfg: ServiceConfig,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, bank: DirectionBank, cfg: ServiceConfig) -> Self {
        let cap = NonZeroUsize::new(cfg.max_sessions.max(1)).expect("nonzero");
        Self {
            checkpoint_hash: model.as_ref().map(|m| m.checkpoint_hash.clone()),
            model: model.map(Mutex::new),
            bank,
            sessions: Mutex::new(LruCache::new(cap)),
            queue: Arc::new(Semaphore::new(cfg.queue_capacity.max(1))),
            cfg,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Runs model work off the async runtime, bounded by the request queue.
async fn with_model<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState, &LoadedModel) -> ApiResult<T> + Send + 'static,
{
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no checkpoint is loaded"));
    }
    let permit = state
        .queue
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "busy", "request queue is full"))?;
    let st = state.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let model = st.model.as_ref().expect("checked above").lock().map_err(ApiError::internal)?;
        f(&st, &model)
    })
    .await
    .map_err(ApiError::internal)?
}

#[derive(Serialize, Deserialize)]
pub struct InvertResponse {
    pub session_id: String,
    pub inversion_png_base64: String,
    pub recon_mse: f64,
}

async fn invert(State(state): State<Arc<AppState>>, body: Body) -> ApiResult<Json<InvertResponse>> {
    let cap = state.cfg.max_upload_bytes;
    let bytes = to_bytes(body, cap).await.map_err(|_| {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("uploads are limited to {cap} bytes"))
    })?;
    with_model(&state, move |st, model| {
        let img = decode_image(&bytes, model.resolution)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", e.to_string()))?;
        let x = img.to_tensor();
        let enc = tch::no_grad(|| model.models.base_encoder().and_then(|e| e.encode(&x))).map_err(ApiError::internal)?;
        let out = model.render(&enc.f0, &enc.wplus, &enc.wplus).map_err(ApiError::internal)?;
        let recon_mse = f64::try_from((&out - &x).square().mean(Kind::Double)).map_err(ApiError::internal)?;
        let png = png_bytes(&ImageBatch::from_tensor(&out).map_err(ApiError::internal)?, 0).map_err(ApiError::internal)?;
        let id = format!("{:032x}", rand::random::<u128>());
        st.sessions.lock().map_err(ApiError::internal)?.put(
            id.clone(),
            Session {
                f0: enc.f0,
                wplus: enc.wplus,
                last_used: Instant::now(),
            },
        );
        Ok(Json(InvertResponse {
            session_id: id,
            inversion_png_base64: b64(&png),
            recon_mse,
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayersField {
    Spec(String),
    List(Vec<usize>),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BetaField {
    Number(f64),
    /// Accepts "NaN"/"inf" so they can be rejected explicitly.
    Text(String),
}

#[derive(Deserialize)]
struct EditRequest {
    session_id: String,
    direction: String,
    beta: BetaField,
    #[serde(default)]
    layers: Option<LayersField>,
}

#[derive(Serialize, Deserialize)]
pub struct EditResponse {
    pub edited_png_base64: String,
    pub latency_ms: f64,
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<EditResponse>> {
    let started = Instant::now();
    let req: EditRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))?;
    let beta = match &req.beta {
        BetaField::Number(b) => *b,
        BetaField::Text(s) => s.trim().parse::<f64>().unwrap_or(f64::NAN),
    };
    if !beta.is_finite() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_beta", "beta must be a finite number"));
    }
    let (f0, wplus) = {
        let mut sessions = state.sessions.lock().map_err(ApiError::internal)?;
        let ttl = state.cfg.session_ttl;
        match sessions.get_mut(&req.session_id) {
            Some(s) if s.last_used.elapsed() > ttl => {
                sessions.pop(&req.session_id);
                return Err(ApiError::new(StatusCode::NOT_FOUND, "session_expired", "session has expired"));
            }
            Some(s) => {
                s.last_used = Instant::now();
                (s.f0.shallow_clone(), s.wplus.shallow_clone())
            }
            None => return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_session", "no such session")),
        }
    };
    let entry = state
        .bank
        .get(&req.direction)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_direction", format!("no direction `{}`", req.direction)))?;
    let num_layers = wplus.size()[1] as usize;
    let layers = match req.layers {
        None => None,
        Some(LayersField::Spec(s)) => Some(
            parse_layer_spec(&s, num_layers)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_layers", e.to_string()))?,
        ),
        Some(LayersField::List(v)) => {
            if v.iter().any(|&l| l >= num_layers) {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_layers", "layer index out of range"));
            }
            Some(v)
        }
    };
    let spec = EditSpec::direction(entry.vector.clone(), beta)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit", e.to_string()))?
        .with_layers(layers);
    with_model(&state, move |_, model| {
        let w_edit = apply_edit(&wplus, &spec).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit", e.to_string()))?;
        let out = model.render(&f0, &wplus, &w_edit).map_err(ApiError::internal)?;
        let png = png_bytes(&ImageBatch::from_tensor(&out).map_err(ApiError::internal)?, 0).map_err(ApiError::internal)?;
        Ok(Json(EditResponse {
            edited_png_base64: b64(&png),
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        }))
    })
    .await
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct DirectionInfo {
    pub name: String,
    pub method: String,
    pub score: f64,
    pub suggested_beta_range: [f64; 2],
}

/// Slider range offered to clients: twice the default edit magnitude
/// either way.
pub const SUGGESTED_BETA: f64 = 2.0 * DEFAULT_BETA;

async fn directions(State(state): State<Arc<AppState>>) -> Json<Vec<DirectionInfo>> {
    Json(
        state
            .bank
            .iter()
            .map(|(name, e)| DirectionInfo {
                name: name.clone(),
                method: e.method.clone(),
                score: e.score,
                suggested_beta_range: [-SUGGESTED_BETA, SUGGESTED_BETA],
            })
            .collect(),
    )
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": if state.model.is_some() { "ok" } else { "no_model" },
        "checkpoint_hash": state.checkpoint_hash,
        "sessions": state.session_count(),
    }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/invert", post(invert))
        .route("/edit", post(edit).layer(DefaultBodyLimit::max(64 << 10)))
        .route("/directions", get(directions))
        .route("/health", get(health))
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::disable());
    if let Some(dir) = &state.cfg.static_dir {
        app = app.nest_service("/ui", ServeDir::new(dir));
    }
    if let Some(origin) = &state.cfg.cors_origin {
        let allow = if origin == "*" {
            AllowOrigin::any()
        } else {
            AllowOrigin::exact(HeaderValue::from_str(origin).unwrap_or(HeaderValue::from_static("null")))
        };
        app = app.layer(
            CorsLayer::new()
                .allow_origin(allow)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    app.fallback(not_found).with_state(state)
}

pub async fn serve(addr: std::net::SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
