//! HTTP API over a trained snapshot: text and audio embedding, gallery
//! retrieval and soundscape maps.
//!
//! All numeric work goes through the same library calls the CLI uses, so a
//! map requested here is byte-identical to one written by `geoclap map`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use geoclap_core::audio::{self, MelExtractor};
use geoclap_core::dataset::{self, FeatureTable};
use geoclap_core::embedding::{l2_normalize, EmbeddingBatch, EmbeddingVector};
use geoclap_core::encoders::{load_checkpoint, ModelSnapshot, Modality};
use geoclap_core::soundscape::{
    self, GeoBoundingBox, MapError, MapMetadata, MapOptions, Query, Raster, TileIndex, TileSource,
};

pub const ENV_SNAPSHOT: &str = "GEOCLAP_SNAPSHOT";
pub const ENV_GALLERY: &str = "GEOCLAP_GALLERY";
pub const ENV_LISTEN: &str = "GEOCLAP_LISTEN";
pub const ENV_TILES: &str = "GEOCLAP_TILES";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_MAX_CELLS: usize = 65_536;
pub const MAX_AUDIO_SECONDS: f64 = 60.0;
const BODY_LIMIT_BYTES: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("loading {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub snapshot_path: Option<PathBuf>,
    /// Feature table (JSONL) embedded at startup for `/v1/retrieve`.
    pub gallery_path: Option<PathBuf>,
    /// Tile index (JSONL) backing `/v1/soundscape`.
    pub tiles_path: Option<PathBuf>,
    pub max_cells: usize,
    pub request_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().expect("valid default address"),
            snapshot_path: None,
            gallery_path: None,
            tiles_path: None,
            max_cells: DEFAULT_MAX_CELLS,
            request_timeout: Duration::from_secs(60),
        }
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, ServiceError> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(ENV_LISTEN) {
            c.listen = v
                .parse()
                .map_err(|e| ServiceError::Config(format!("{ENV_LISTEN}={v:?}: {e}")))?;
        }
        let path = |k| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        c.snapshot_path = path(ENV_SNAPSHOT);
        c.gallery_path = path(ENV_GALLERY);
        c.tiles_path = path(ENV_TILES);
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_cells == 0 || self.request_timeout.is_zero() {
            return Err(ServiceError::Config("max_cells and request_timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Gallery items embedded once per modality.
#[derive(Debug, Clone)]
pub struct Gallery {
    embeddings: BTreeMap<Modality, EmbeddingBatch>,
    len: usize,
}

impl Gallery {
    pub fn build(snapshot: &ModelSnapshot, table: &FeatureTable) -> Result<Self, String> {
        let ids = table.ids();
        let batch = table.batch(&ids).map_err(|e| e.to_string())?;
        let mut embeddings = BTreeMap::new();
        for (m, feats) in [
            (Modality::Audio, &batch.audio),
            (Modality::Text, &batch.text),
            (Modality::Image, &batch.image),
        ] {
            let e = snapshot.encode(m, ids.clone(), feats.view()).map_err(|e| e.to_string())?;
            embeddings.insert(m, e);
        }
        Ok(Self { embeddings, len: ids.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Top `k` gallery items of modality `m` by dot product with `query`,
    /// descending; ties keep gallery order.
    pub fn top_k(&self, m: Modality, query: &EmbeddingVector, k: usize) -> Vec<Hit> {
        let g = &self.embeddings[&m];
        let scores: Vec<f64> = g
            .rows()
            .outer_iter()
            .map(|r| r.iter().zip(query.values()).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(k)
            .map(|i| Hit {
                id: g.ids()[i].clone(),
                score: scores[i],
            })
            .collect()
    }
}

/// Everything a request needs; swapped as a unit.
pub struct LoadedModel {
    pub snapshot: ModelSnapshot,
    pub snapshot_hash: String,
    pub gallery: Option<Gallery>,
    pub tiles: Option<Arc<dyn TileSource>>,
    pub extractor: MelExtractor,
}

impl LoadedModel {
    pub fn new(
        snapshot: ModelSnapshot,
        gallery: Option<&FeatureTable>,
        tiles: Option<Arc<dyn TileSource>>,
    ) -> Result<Self, ServiceError> {
        let gallery = gallery
            .map(|t| Gallery::build(&snapshot, t))
            .transpose()
            .map_err(|reason| ServiceError::Load {
                path: PathBuf::from("<gallery>"),
                reason,
            })?;
        Ok(Self {
            snapshot_hash: snapshot.config_hash_hex(),
            snapshot,
            gallery,
            tiles,
            extractor: MelExtractor::new(Default::default()).expect("default mel config is valid"),
        })
    }

    pub fn from_paths(snapshot: &Path, gallery: Option<&Path>, tiles: Option<&Path>) -> Result<Self, ServiceError> {
        let load_err = |path: &Path| {
            let path = path.to_path_buf();
            move |e: &dyn std::fmt::Display| ServiceError::Load {
                path,
                reason: e.to_string(),
            }
        };
        let snap = load_checkpoint(snapshot).map_err(|e| load_err(snapshot)(&e))?;
        let table = gallery
            .map(|p| FeatureTable::load(p).map_err(|e| load_err(p)(&e)))
            .transpose()?;
        let tiles = tiles
            .map(|p| {
                TileIndex::load(p)
                    .map(|t| Arc::new(t) as Arc<dyn TileSource>)
                    .map_err(|e| load_err(p)(&e))
            })
            .transpose()?;
        Self::new(snap, table.as_ref(), tiles)
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    model: RwLock<Option<Arc<LoadedModel>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            model: RwLock::new(None),
        }
    }

    pub fn with_model(config: ServiceConfig, model: LoadedModel) -> Self {
        let s = Self::new(config);
        s.install(model);
        s
    }

    /// Replaces the model; in-flight requests keep the one they started with.
    pub fn install(&self, model: LoadedModel) {
        *self.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().expect("model lock poisoned").clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unavailable(what: &str) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", format!("{what} not loaded"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<MapError> for ApiError {
    fn from(e: MapError) -> Self {
        let msg = e.to_string();
        match e {
            MapError::QueryLimitExceeded(_) => Self::new(StatusCode::BAD_REQUEST, "query_limit_exceeded", msg),
            MapError::InvalidBbox(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_bbox", msg),
            MapError::InvalidStride(_) | MapError::EmptyGrid { .. } | MapError::NoQueries | MapError::EmptyQuery(_) => {
                Self::bad_request(msg)
            }
            MapError::Audio(_) => Self::new(StatusCode::BAD_REQUEST, "bad_audio", msg),
            MapError::TooManyCells { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "grid_too_large", msg),
            _ => Self::internal(msg),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn model(state: &AppState) -> Result<Arc<LoadedModel>, ApiError> {
    state.current().ok_or_else(|| ApiError::unavailable("snapshot"))
}

/// Runs CPU-bound work off the async executor under the request timeout.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match tokio::time::timeout(state.config.request_timeout, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(ApiError::internal(format!("worker failed: {e}"))),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "timeout",
            format!("no result within {:?}", state.config.request_timeout),
        )),
    }
}

fn decode_clip(bytes: &[u8]) -> Result<audio::WaveformClip, ApiError> {
    let clip =
        audio::decode_wav(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_audio", e.to_string()))?;
    if clip.duration_s() > MAX_AUDIO_SECONDS {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "audio_too_long",
            format!("{:.1} s exceeds {MAX_AUDIO_SECONDS} s", clip.duration_s()),
        ));
    }
    Ok(clip)
}

fn decode_b64(s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim())
        .map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f64>,
}

async fn embed_text(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<EmbeddingResponse> {
    let req: EmbedTextRequest = parse_json(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text is empty"));
    }
    let m = model(&state)?;
    let v = blocking(&state, move || Ok(soundscape::embed_text(&m.snapshot, &req.text)?)).await?;
    Ok(Json(EmbeddingResponse {
        embedding: v.into_values(),
    }))
}

async fn embed_audio(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<EmbeddingResponse> {
    let m = model(&state)?;
    let v = blocking(&state, move || {
        let clip = decode_clip(&body)?;
        Ok(soundscape::embed_audio(&m.snapshot, &m.extractor, &clip)?)
    })
    .await?;
    Ok(Json(EmbeddingResponse {
        embedding: v.into_values(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySpec {
    Text(String),
    /// Base64-encoded WAV file.
    AudioBase64(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoundscapeRequest {
    pub bbox: GeoBoundingBox,
    pub stride_m: f64,
    pub queries: Vec<QuerySpec>,
    #[serde(default)]
    pub include_heatmaps: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapPayload {
    pub query: String,
    pub png_base64: String,
    /// Min-max normalized scores, row-major from the north-west corner.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundscapeResponse {
    pub png_base64: String,
    pub world_file: String,
    pub metadata: MapMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmaps: Option<Vec<HeatmapPayload>>,
}

fn run_soundscape(m: &LoadedModel, req: SoundscapeRequest, max_cells: usize) -> Result<SoundscapeResponse, ApiError> {
    req.bbox.validate()?;
    if req.queries.len() > soundscape::MAX_QUERIES {
        return Err(MapError::QueryLimitExceeded(req.queries.len()).into());
    }
    let queries = req
        .queries
        .iter()
        .map(|q| match q {
            QuerySpec::Text(t) => Ok(Query::Text(t.clone())),
            QuerySpec::AudioBase64(b) => Ok(Query::Audio(decode_clip(&decode_b64(b)?)?)),
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    let tiles = m.tiles.as_ref().ok_or_else(|| ApiError::unavailable("tile index"))?;
    let opts = MapOptions {
        max_cells: Some(max_cells),
        ..Default::default()
    };
    let s = soundscape::soundscape_from_queries(
        &req.bbox,
        &queries,
        &m.snapshot,
        req.stride_m,
        tiles.as_ref(),
        &m.extractor,
        &opts,
    )?;
    let rendered = s.render()?;
    let heatmaps = if req.include_heatmaps {
        Some(
            s.normalized
                .iter()
                .map(|h| {
                    let png = soundscape::encode_png(Raster::Heatmap(h))?;
                    Ok(HeatmapPayload {
                        query: h.query.clone(),
                        png_base64: B64.encode(png),
                        values: h.scores.outer_iter().map(|r| r.to_vec()).collect(),
                    })
                })
                .collect::<Result<Vec<_>, MapError>>()?,
        )
    } else {
        None
    };
    Ok(SoundscapeResponse {
        png_base64: B64.encode(&rendered.png),
        world_file: rendered.world_file,
        metadata: rendered.metadata,
        heatmaps,
    })
}

async fn soundscape_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<SoundscapeResponse> {
    let req: SoundscapeRequest = parse_json(&body)?;
    let m = model(&state)?;
    let max_cells = state.config.max_cells;
    Ok(Json(blocking(&state, move || run_soundscape(&m, req, max_cells)).await?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub modality_from: Modality,
    pub modality_to: Modality,
    /// Text for `text`, base64 WAV for `audio`, base64 PNG tile for `image`.
    #[serde(default)]
    pub payload: Option<String>,
    /// A precomputed query embedding; used instead of `payload`.
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<Hit>,
}

pub const DEFAULT_K: usize = 10;

fn run_retrieve(m: &LoadedModel, req: RetrieveRequest) -> Result<RetrieveResponse, ApiError> {
    let gallery = m.gallery.as_ref().ok_or_else(|| ApiError::unavailable("gallery"))?;
    let k = req.k.unwrap_or(DEFAULT_K.min(gallery.len()));
    if k == 0 || k > gallery.len() {
        return Err(ApiError::bad_request(format!("k must be in 1..={}", gallery.len())));
    }
    let query = match (&req.embedding, &req.payload) {
        (Some(v), _) => {
            if v.len() != m.snapshot.embed_dim() {
                return Err(ApiError::bad_request(format!(
                    "embedding has {} values, expected {}",
                    v.len(),
                    m.snapshot.embed_dim()
                )));
            }
            l2_normalize(v).map_err(|e| ApiError::bad_request(e.to_string()))?
        }
        (None, Some(p)) => match req.modality_from {
            Modality::Text => soundscape::embed_text(&m.snapshot, p)?,
            Modality::Audio => soundscape::embed_audio(&m.snapshot, &m.extractor, &decode_clip(&decode_b64(p)?)?)?,
            Modality::Image => {
                let bad = |e: dataset::DatasetError| ApiError::bad_request(e.to_string());
                let tile = dataset::decode_tile_png(&decode_b64(p)?).map_err(bad)?;
                let crop = dataset::center_crop(tile.view(), dataset::CROP_SIZE).map_err(bad)?;
                let f = dataset::image_feature_vector(crop.view()).map_err(bad)?;
                m.snapshot
                    .tower(Modality::Image)
                    .encode_one(&f)
                    .map_err(|e| ApiError::internal(e.to_string()))?
            }
        },
        (None, None) => return Err(ApiError::bad_request("payload or embedding required")),
    };
    Ok(RetrieveResponse {
        results: gallery.top_k(req.modality_to, &query, k),
    })
}

async fn retrieve(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<RetrieveResponse> {
    let req: RetrieveRequest = parse_json(&body)?;
    let m = model(&state)?;
    Ok(Json(blocking(&state, move || run_retrieve(&m, req)).await?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub snapshot_hash: Option<String>,
    pub gallery_size: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> (StatusCode, Json<HealthResponse>) {
    match state.current() {
        Some(m) => (
            StatusCode::OK,
            Json(HealthResponse {
                status: "ok".into(),
                snapshot_hash: Some(m.snapshot_hash.clone()),
                gallery_size: m.gallery.as_ref().map_or(0, Gallery::len),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(HealthResponse {
                status: "loading".into(),
                snapshot_hash: None,
                gallery_size: 0,
            }),
        ),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/embed/text", post(embed_text))
        .route("/v1/embed/audio", post(embed_audio))
        .route("/v1/soundscape", post(soundscape_handler))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES))
        .with_state(state)
}

/// Binds first and loads the snapshot in the background, so `/v1/health`
/// answers 503 until the model is ready. Stops on Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let state = Arc::new(AppState::new(config.clone()));
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    if let Some(snap) = config.snapshot_path.clone() {
        let st = state.clone();
        tokio::task::spawn_blocking(move || {
            match LoadedModel::from_paths(&snap, config.gallery_path.as_deref(), config.tiles_path.as_deref()) {
                Ok(m) => {
                    log::info!("snapshot {} loaded", m.snapshot_hash);
                    st.install(m);
                }
                Err(e) => log::error!("{e}"),
            }
        });
    } else {
        log::warn!("{ENV_SNAPSHOT} not set; serving 503 until a snapshot is installed");
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
