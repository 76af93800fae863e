use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reshape_core::mapping::{AttributeEdit, AttributeVector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::ServiceError;
use crate::project::{FitDocument, HistoryEntry, Service};
use crate::protocol::{BackendClient, GenerationParams};
use crate::store::Store;

/// Startup configuration. Every field has an environment variable; see
/// [`Config::from_env`].
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub model: PathBuf,
    pub map: PathBuf,
    pub backend_url: Option<String>,
}

impl Config {
    /// `RESHAPE_ADDR` (default 127.0.0.1:8080), `RESHAPE_DATA_DIR`,
    /// `RESHAPE_MODEL`, `RESHAPE_MAP` and the optional `RESHAPE_BACKEND_URL`.
    pub fn from_env() -> anyhow::Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| anyhow::anyhow!("{k} is not set"));
        Ok(Self {
            addr: std::env::var("RESHAPE_ADDR").unwrap_or_else(|_| "127.0.0.1:8080".into()).parse()?,
            data_dir: var("RESHAPE_DATA_DIR")?.into(),
            model: var("RESHAPE_MODEL")?.into(),
            map: var("RESHAPE_MAP")?.into(),
            backend_url: std::env::var("RESHAPE_BACKEND_URL").ok().filter(|s| !s.is_empty()),
        })
    }

    pub fn build_service(&self) -> anyhow::Result<Service> {
        use anyhow::Context;
        let model = reshape_core::body::load_model(&self.model)
            .with_context(|| format!("loading body model {}", self.model.display()))?;
        let map_text = std::fs::read_to_string(&self.map).with_context(|| format!("reading {}", self.map.display()))?;
        let map = reshape_core::mapping::LinearAttributeMap::from_json(&map_text)
            .with_context(|| format!("parsing {}", self.map.display()))?;
        let store = Store::open(&self.data_dir)?;
        Ok(Service::new(model, map, store, self.backend_url.as_deref().map(BackendClient::new))?)
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        use ServiceError::*;
        let status = match &self {
            NotFound(_) | NoSuchEntry { .. } => StatusCode::NOT_FOUND,
            Decode(_) => StatusCode::BAD_REQUEST,
            InvalidFit(_) | Mapping(_) | Body(_) | NonCanonicalPrompt(_) => StatusCode::UNPROCESSABLE_ENTITY,
            NoFit(_) => StatusCode::CONFLICT,
            NoBackend => StatusCode::SERVICE_UNAVAILABLE,
            Unreachable { .. } | Backend { .. } | BadResponse(_) => StatusCode::BAD_GATEWAY,
            Render(_) | Corrupt(_) | Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = match &self {
            Backend { status, body } => {
                json!({"error": self.to_string(), "backend_status": status, "backend_body": body})
            }
            _ => json!({"error": self.to_string()}),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<Service>;
type ApiResult<T> = Result<T, ServiceError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Corrupt(format!("worker panicked: {e}")))?
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/map", get(map_info))
        .route("/projects", post(create_project))
        .route("/projects/{id}/fit", post(import_fit))
        .route("/projects/{id}/sliders", post(apply_sliders))
        .route("/projects/{id}/conditioning.png", get(conditioning))
        .route("/projects/{id}/reference.png", get(reference))
        .route("/projects/{id}/mesh.json", get(mesh))
        .route("/projects/{id}/generate", post(generate))
        .route("/projects/{id}/generations/{n}", get(generation_output))
        .route("/projects/{id}/history", get(history))
        .route("/projects/{id}/replay", get(replay))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(service)
}

/// Binds, prints `listening on http://<addr>` to stdout and serves until
/// Ctrl-C or SIGTERM. Every edit is persisted before it is acknowledged,
/// so shutdown only has to drain in-flight requests.
pub async fn serve(config: Config) -> anyhow::Result<()> {
    let service = Arc::new(config.build_service()?);
    let listener = TcpListener::bind(config.addr).await.map_err(|e| anyhow::anyhow!("binding {}: {e}", config.addr))?;
    println!("listening on http://{}", listener.local_addr()?);
    tracing::info!(data_dir = %config.data_dir.display(), backend = ?config.backend_url, "service started");
    axum::serve(listener, router(service)).with_graceful_shutdown(shutdown_signal()).await?;
    Ok(())
}

pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

async fn healthz(State(svc): State<Shared>) -> Json<serde_json::Value> {
    let m = svc.model();
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "model": {
            "vertices": m.num_vertices(),
            "faces": m.num_faces(),
            "joints": m.num_joints(),
            "betas": m.num_betas(),
        },
        "attributes": svc.map().attribute_names,
        "backend": svc.backend().map(|b| b.base_url()),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Slider bounds: the fitting corpus range widened by 20% of its span on
/// each side.
pub fn slider_ranges(map: &reshape_core::mapping::LinearAttributeMap) -> Vec<SliderRange> {
    map.attribute_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let span = map.attr_max[i] - map.attr_min[i];
            SliderRange { name: name.clone(), min: map.attr_min[i] - 0.2 * span, max: map.attr_max[i] + 0.2 * span }
        })
        .collect()
}

async fn map_info(State(svc): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "attributes": slider_ranges(svc.map()) }))
}

async fn create_project(State(svc): State<Shared>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let project = blocking(move || svc.create_project(&body)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": project.id, "project": project }))))
}

async fn import_fit(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(fit): Json<FitDocument>,
) -> ApiResult<Json<HistoryEntry>> {
    Ok(Json(blocking(move || svc.import_fit(&id, fit)).await?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidersRequest {
    pub edits: Vec<AttributeEdit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidersResponse {
    pub entry: usize,
    pub beta: Vec<f64>,
    pub slider_state: AttributeVector,
    pub conditioning_sha256: String,
    pub conditioning_url: String,
}

async fn apply_sliders(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<SlidersRequest>,
) -> ApiResult<Json<SlidersResponse>> {
    let pid = id.clone();
    let (entry, _) = blocking(move || svc.apply_sliders(&pid, &req.edits)).await?;
    Ok(Json(SlidersResponse {
        conditioning_url: format!("/projects/{id}/conditioning.png?entry={}", entry.index),
        entry: entry.index,
        beta: entry.beta,
        slider_state: entry.slider_state,
        conditioning_sha256: entry.conditioning_sha256,
    }))
}

#[derive(Debug, Deserialize)]
struct EntryQuery {
    entry: Option<usize>,
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn conditioning(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<EntryQuery>,
) -> ApiResult<Response> {
    Ok(png(blocking(move || svc.conditioning_png(&id, q.entry)).await?))
}

async fn reference(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(move || svc.reference_png(&id)).await?))
}

async fn generation_output(State(svc): State<Shared>, Path((id, n)): Path<(String, usize)>) -> ApiResult<Response> {
    Ok(png(blocking(move || svc.output_png(&id, n)).await?))
}

async fn mesh(State(svc): State<Shared>, Path(id): Path<String>, Query(q): Query<EntryQuery>) -> ApiResult<Response> {
    Ok(Json(blocking(move || svc.mesh(&id, q.entry)).await?).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub entry: Option<usize>,
    #[serde(flatten)]
    pub params: GenerationParams,
}

async fn generate(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<GenerateRequest>,
) -> ApiResult<Response> {
    let record = svc.request_generation(&id, req.entry, req.params).await?;
    Ok(Json(record).into_response())
}

async fn history(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || svc.load(&id)).await?).into_response())
}

async fn replay(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(move || svc.replay(&id)).await?).into_response())
}
