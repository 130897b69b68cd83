//! JSON-over-HTTP inference for a frozen checkpoint.
//!
//! Images travel as base64 PNG strings; codes as plain float arrays. Every
//! response carries `x-progae-version` and the JSON bodies a
//! `schema_version` field.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::set_header::SetResponseHeaderLayer;

use progae_core::config::ServeConfig;
use progae_core::data::{decode_image, encode_grid_png, encode_png};
use progae_core::latent_ops::{code_grid, edit_code, AttributeVector, GridSpec, Interpolation};
use progae_core::model::{FrozenModel, ImageBatch, LatentCode};
use progae_core::{checkpoint, Tensor};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION_HEADER: &str = "x-progae-version";

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("no checkpoint configured (`serve.checkpoint`)")]
    NoCheckpoint,
    #[error("attribute `{name}` has {found} dimensions, the model {expected}")]
    AttributeDim { name: String, expected: usize, found: usize },
    #[error(transparent)]
    Core(#[from] progae_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("attribute file {path}: {source}")]
    Attribute { path: String, source: serde_json::Error },
}

/// Immutable state shared by all requests.
pub struct AppState {
    pub model: FrozenModel,
    pub config: ServeConfig,
    pub attributes: BTreeMap<String, AttributeVector>,
}

impl AppState {
    pub fn new(model: FrozenModel, config: ServeConfig, attributes: Vec<AttributeVector>) -> Result<Self, ServeError> {
        let d = model.encoder.config.latent_dim;
        let mut map = BTreeMap::new();
        for a in attributes {
            if a.direction.len() != d {
                return Err(ServeError::AttributeDim {
                    name: a.name,
                    expected: d,
                    found: a.direction.len(),
                });
            }
            map.insert(a.name.clone(), a);
        }
        Ok(Self {
            model,
            config,
            attributes: map,
        })
    }

    /// Loads the checkpoint and attribute library named by `config`.
    pub fn load(config: ServeConfig) -> Result<Self, ServeError> {
        if config.checkpoint.is_empty() {
            return Err(ServeError::NoCheckpoint);
        }
        let (model, _) = checkpoint::load_frozen(Path::new(&config.checkpoint))?;
        let attributes = if config.attributes_dir.is_empty() {
            Vec::new()
        } else {
            load_attributes(Path::new(&config.attributes_dir))?
        };
        Self::new(model, config, attributes)
    }
}

/// Reads every `*.json` attribute vector in `dir`, sorted by file name.
pub fn load_attributes(dir: &Path) -> Result<Vec<AttributeVector>, ServeError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p)?;
            serde_json::from_slice(&bytes).map_err(|source| ServeError::Attribute {
                path: p.display().to_string(),
                source,
            })
        })
        .collect()
}

/// Request failure mapped onto an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }
}

impl From<progae_core::Error> for ApiError {
    fn from(e: progae_core::Error) -> Self {
        use progae_core::Error as E;
        let status = match e {
            E::Argument(_) | E::Shape(_) | E::Data(_) | E::Image(_) | E::Json(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self {
            status: r.status(),
            message: r.body_text(),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    schema_version: u32,
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct EncodeRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodeResponse {
    pub schema_version: u32,
    pub code: Vec<f64>,
}

#[derive(Debug, Deserialize)]
pub struct DecodeRequest {
    pub code: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub schema_version: u32,
    pub image: String,
    /// The code the image was decoded from.
    pub code: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ManipulateRequest {
    pub image: Option<String>,
    pub code: Option<Vec<f64>>,
    pub attribute: Option<String>,
    pub direction: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    /// A sweep: one frame per value.
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Frame {
    pub lambda: f64,
    pub image: String,
    pub code: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManipulateResponse {
    pub schema_version: u32,
    /// Result of `lambda`, or of the last sweep value.
    pub image: String,
    /// Post-edit code, usable as the next request's `code`.
    pub code: Vec<f64>,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub dim: usize,
    pub source_counts: (usize, usize),
    pub config_hash: String,
}

#[derive(Debug, Deserialize)]
pub struct InterpolateRequest {
    pub codes: Vec<Vec<f64>>,
    pub t: Option<f64>,
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub schema_version: u32,
    pub rows: usize,
    pub cols: usize,
    /// All cells tiled into one PNG.
    pub image: String,
    /// Each cell as its own PNG, row-major.
    pub cells: Vec<String>,
    pub codes: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub schema_version: u32,
    pub version: String,
    pub resolution: usize,
    pub latent_dim: usize,
}

fn code_from(values: Vec<f64>, dim: usize) -> Result<LatentCode, ApiError> {
    if values.len() != dim {
        return Err(ApiError::bad(format!("code has {} entries, expected {dim}", values.len())));
    }
    LatentCode::unit(values).map_err(|e| ApiError::bad(e.to_string()))
}

fn image_from(state: &AppState, b64: &str) -> Result<ImageBatch, ApiError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad(format!("image is not base64: {e}")))?;
    if bytes.len() > state.config.max_image_bytes {
        return Err(ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: format!("image of {} bytes exceeds {}", bytes.len(), state.config.max_image_bytes),
        });
    }
    let res = state.model.resolution();
    let chw = decode_image(&bytes, res).map_err(|e| ApiError::bad(format!("undecodable image: {e}")))?;
    Ok(ImageBatch::new(Tensor::new(&[1, 3, res, res], chw)?)?)
}

fn png_b64(batch: &ImageBatch, i: usize) -> Result<String, ApiError> {
    Ok(STANDARD.encode(encode_png(batch.image(i), batch.resolution())?))
}

/// Runs CPU-bound model work off the async executor.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })?
        .map(Json)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        resolution: state.model.resolution(),
        latent_dim: state.model.encoder.config.latent_dim,
    })
}

async fn encode(
    State(state): State<Arc<AppState>>,
    req: Result<Json<EncodeRequest>, JsonRejection>,
) -> ApiResult<CodeResponse> {
    let Json(req) = req?;
    blocking(state, move |s| {
        let x = image_from(s, &req.image)?;
        let code = s.model.encode(&x)?.remove(0);
        Ok(CodeResponse {
            schema_version: SCHEMA_VERSION,
            code: code.into_values(),
        })
    })
    .await
}

async fn decode(
    State(state): State<Arc<AppState>>,
    req: Result<Json<DecodeRequest>, JsonRejection>,
) -> ApiResult<ImageResponse> {
    let Json(req) = req?;
    blocking(state, move |s| {
        let code = code_from(req.code, s.model.encoder.config.latent_dim)?;
        let img = s.model.decode(std::slice::from_ref(&code))?;
        Ok(ImageResponse {
            schema_version: SCHEMA_VERSION,
            image: png_b64(&img, 0)?,
            code: code.into_values(),
        })
    })
    .await
}

fn manipulate_sync(s: &AppState, req: ManipulateRequest) -> Result<ManipulateResponse, ApiError> {
    let d = s.model.encoder.config.latent_dim;
    let start = match (req.code, req.image) {
        (Some(c), _) => code_from(c, d)?,
        (None, Some(img)) => s.model.encode(&image_from(s, &img)?)?.remove(0),
        (None, None) => return Err(ApiError::bad("either `image` or `code` is required")),
    };
    let direction = match (req.attribute, req.direction) {
        (Some(name), _) => s
            .attributes
            .get(&name)
            .ok_or_else(|| ApiError::not_found(format!("unknown attribute `{name}`")))?
            .direction
            .clone(),
        (None, Some(dir)) if dir.len() == d => dir,
        (None, Some(dir)) => {
            return Err(ApiError::bad(format!("direction has {} entries, expected {d}", dir.len())))
        }
        (None, None) => return Err(ApiError::bad("either `attribute` or `direction` is required")),
    };
    let lambdas = match (req.lambda, req.lambdas) {
        (_, Some(ls)) if !ls.is_empty() => ls,
        (Some(l), _) => vec![l],
        _ => vec![0.0],
    };
    let bound = s.config.max_lambda;
    if let Some(l) = lambdas.iter().find(|l| !(l.abs() <= bound)) {
        return Err(ApiError::bad(format!("lambda {l} outside [-{bound}, {bound}]")));
    }
    let codes = lambdas
        .iter()
        .map(|&l| edit_code(&start, &direction, l))
        .collect::<Result<Vec<_>, _>>()?;
    let images = s.model.decode(&codes)?;
    let mut frames = Vec::with_capacity(codes.len());
    for (i, (code, &lambda)) in codes.into_iter().zip(&lambdas).enumerate() {
        frames.push(Frame {
            lambda,
            image: png_b64(&images, i)?,
            code: code.into_values(),
        });
    }
    let last = frames.last().expect("at least one lambda");
    Ok(ManipulateResponse {
        schema_version: SCHEMA_VERSION,
        image: last.image.clone(),
        code: last.code.clone(),
        frames,
    })
}

async fn manipulate(
    State(state): State<Arc<AppState>>,
    req: Result<Json<ManipulateRequest>, JsonRejection>,
) -> ApiResult<ManipulateResponse> {
    let Json(req) = req?;
    blocking(state, move |s| manipulate_sync(s, req)).await
}

async fn attributes(State(state): State<Arc<AppState>>) -> Json<Vec<AttributeInfo>> {
    Json(
        state
            .attributes
            .values()
            .map(|a| AttributeInfo {
                name: a.name.clone(),
                dim: a.direction.len(),
                source_counts: a.source_counts,
                config_hash: a.config_hash.clone(),
            })
            .collect(),
    )
}

fn interpolate_sync(s: &AppState, req: InterpolateRequest) -> Result<InterpolateResponse, ApiError> {
    let d = s.model.encoder.config.latent_dim;
    let corners = req
        .codes
        .into_iter()
        .map(|c| code_from(c, d))
        .collect::<Result<Vec<_>, _>>()?;
    let (spec, codes) = match (req.t, req.grid) {
        (Some(t), _) => {
            if corners.len() != 2 {
                return Err(ApiError::bad("`t` interpolates between exactly two codes"));
            }
            let z = req.interpolation.apply(&corners[0], &corners[1], t)?;
            (GridSpec::strip(1), vec![z])
        }
        (None, Some(spec)) => (spec, code_grid(&corners, spec, req.interpolation)?),
        (None, None) => return Err(ApiError::bad("either `t` or `grid` is required")),
    };
    let images = s.model.decode(&codes)?;
    let cells = (0..images.len()).map(|i| png_b64(&images, i)).collect::<Result<_, _>>()?;
    Ok(InterpolateResponse {
        schema_version: SCHEMA_VERSION,
        rows: spec.rows,
        cols: spec.cols,
        image: STANDARD.encode(encode_grid_png(&images, spec.rows, spec.cols)?),
        cells,
        codes: codes.into_iter().map(LatentCode::into_values).collect(),
    })
}

async fn interpolate(
    State(state): State<Arc<AppState>>,
    req: Result<Json<InterpolateRequest>, JsonRejection>,
) -> ApiResult<InterpolateResponse> {
    let Json(req) = req?;
    blocking(state, move |s| interpolate_sync(s, req)).await
}

async fn unknown_route(uri: axum::http::Uri) -> ApiError {
    ApiError::not_found(format!("no endpoint at {}", uri.path()))
}

/// Request body ceiling: a base64 image at the configured limit plus JSON framing.
fn body_limit(max_image_bytes: usize) -> usize {
    max_image_bytes.div_ceil(3) * 4 + (64 << 10)
}

pub fn router(state: Arc<AppState>) -> Router {
    let origin = if state.config.allowed_origin == "*" {
        AllowOrigin::any()
    } else {
        match HeaderValue::from_str(&state.config.allowed_origin) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("ignoring unparsable CORS origin `{}`", state.config.allowed_origin);
                AllowOrigin::list([])
            }
        }
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([header::HeaderName::from_static(VERSION_HEADER)]);
    let limit = body_limit(state.config.max_image_bytes);
    Router::new()
        .route("/health", get(health))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/manipulate", post(manipulate))
        .route("/attributes", get(attributes))
        .route("/interpolate", post(interpolate))
        .fallback(unknown_route)
        .layer(DefaultBodyLimit::max(limit))
        .layer(SetResponseHeaderLayer::overriding(
            header::HeaderName::from_static(VERSION_HEADER),
            HeaderValue::from_static(env!("CARGO_PKG_VERSION")),
        ))
        .layer(cors)
        .with_state(state)
}

/// Binds `config.bind` and serves until the process is stopped.
pub async fn run(state: AppState) -> Result<(), ServeError> {
    let bind = state.config.bind.clone();
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
