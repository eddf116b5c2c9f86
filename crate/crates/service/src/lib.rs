//! HTTP/JSON front end for the edit pipeline.
//!
//! | route                   | purpose                                   |
//! |-------------------------|-------------------------------------------|
//! | `POST /api/edit`        | run one edit                              |
//! | `GET /api/labels`       | palette, ordered by id                    |
//! | `GET /api/samples`      | ids of the mounted dataset, paginated     |
//! | `GET /api/samples/{id}` | one sample rendered as PNG                |
//! | `/` and below           | static editor bundle                      |
//!
//! Wire images are base64-encoded PNGs. Handlers only read an immutable
//! model snapshot; [`AppState::swap_model`] replaces it between requests.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mexgan::checkpoint::Checkpoint;
use mexgan::data::{color_encode, one_hot, ColorPalette, Dataset, LabelMap, RgbImage};
use mexgan::geometry::{make_mask, BoxCorners, EditBox, Mask};
use mexgan::metrics::{hamm, tiou};
use mexgan::networks::Generator;
use mexgan::pipeline::edit_map;
use mexgan::training::{load_generator, Task};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

/// A loaded edit model.
pub struct Model {
    pub generator: Generator,
    pub palette: ColorPalette,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> mexgan::Result<Self> {
        if ck.config.task != Task::Segmentation {
            return Err(mexgan::Error::Config("checkpoint is not a segmentation model".into()));
        }
        let palette = ck
            .palette
            .clone()
            .ok_or_else(|| mexgan::Error::Config("checkpoint has no palette".into()))?;
        Ok(Self {
            generator: load_generator(ck)?,
            palette,
        })
    }
}

/// Optional downstream model turning a label map into an image.
pub trait Translator: Send + Sync {
    fn translate(&self, labels: &LabelMap, palette: &ColorPalette) -> mexgan::Result<RgbImage>;
}

/// Runs a segmentation-shaped generator on the full one-hot map with an
/// empty mask channel.
pub struct GeneratorTranslator {
    pub generator: Generator,
}

impl Translator for GeneratorTranslator {
    fn translate(&self, labels: &LabelMap, palette: &ColorPalette) -> mexgan::Result<RgbImage> {
        let input = one_hot(labels, palette)?.concat_channels(&Mask::zeros(labels.height(), labels.width()).to_tensor())?;
        RgbImage::from_tensor(&self.generator.forward(&input)?)
    }
}

pub struct AppState {
    model: RwLock<Option<Arc<Model>>>,
    translator: Option<Arc<dyn Translator>>,
    dataset: Option<Arc<Dataset>>,
}

impl AppState {
    pub fn new(model: Option<Model>, dataset: Option<Dataset>, translator: Option<Arc<dyn Translator>>) -> Self {
        Self {
            model: RwLock::new(model.map(Arc::new)),
            translator,
            dataset: dataset.map(Arc::new),
        }
    }

    pub fn model(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock").clone()
    }

    /// Atomically replaces the model; in-flight requests keep their snapshot.
    pub fn swap_model(&self, model: Option<Model>) {
        *self.model.write().expect("model lock") = model.map(Arc::new);
    }

    fn palette(&self) -> Option<ColorPalette> {
        self.model()
            .map(|m| m.palette.clone())
            .or_else(|| self.dataset.as_ref().map(|d| d.palette.clone()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    field: Option<&'static str>,
    message: String,
}

impl ApiError {
    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            field: Some(field),
            message: message.into(),
        }
    }

    fn status(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            field: None,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = f.into();
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequestWire {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(rename = "box")]
    pub bbox: Vec<i64>,
    pub target_label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResponseWire {
    pub manipulated_color: String,
    pub manipulated_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamm: Option<f64>,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated_image: Option<String>,
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::status(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<EditResponseWire>, ApiError> {
    let start = Instant::now();
    let model = state
        .model()
        .ok_or_else(|| ApiError::status(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let req: EditRequestWire =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad("body", format!("invalid request: {e}")))?;

    let (labels, truth) = match (&req.label_map, &req.sample_id) {
        (Some(b64), None) => {
            let bytes = B64
                .decode(b64)
                .map_err(|e| ApiError::bad("label_map", format!("not base64: {e}")))?;
            let map = LabelMap::from_png_bytes(&bytes).map_err(|e| ApiError::bad("label_map", e.to_string()))?;
            (map, None)
        }
        (None, Some(id)) => {
            let ds = state
                .dataset
                .as_ref()
                .ok_or_else(|| ApiError::bad("sample_id", "no dataset mounted"))?;
            let rec = ds
                .records
                .iter()
                .find(|r| &r.name == id)
                .ok_or_else(|| ApiError::bad("sample_id", format!("unknown sample {id:?}")))?;
            (rec.labels.clone(), Some(rec.labels.clone()))
        }
        _ => return Err(ApiError::bad("label_map", "give exactly one of label_map and sample_id")),
    };
    labels
        .validate(&model.palette)
        .map_err(|e| ApiError::bad("label_map", e.to_string()))?;
    let [r1, c1, r2, c2] = <[i64; 4]>::try_from(req.bbox.as_slice())
        .map_err(|_| ApiError::bad("box", format!("expected [r1, c1, r2, c2], got {} values", req.bbox.len())))?;
    let corners = BoxCorners::checked(r1, c1, r2, c2, labels.height(), labels.width())
        .map_err(|e| ApiError::bad("box", e.to_string()))?;
    let target = u8::try_from(req.target_label)
        .map_err(|_| ApiError::bad("target_label", format!("label {} out of range", req.target_label)))?;
    model
        .palette
        .validate_target(target)
        .map_err(|e| ApiError::bad("target_label", e.to_string()))?;

    let translator = state.translator.clone();
    let response = tokio::task::spawn_blocking(move || -> Result<EditResponseWire, ApiError> {
        let edit = EditBox::new(corners, target);
        let out = edit_map(&model.generator, &model.palette, &labels, &edit).map_err(internal)?;
        let (tiou_v, hamm_v) = match &truth {
            Some(t) => {
                let mask = make_mask(&corners, t.height(), t.width()).map_err(internal)?;
                (
                    Some(tiou(&out.manipulated_labels, t, &mask, target).map_err(internal)?),
                    Some(hamm(&out.manipulated_labels, t, &mask).map_err(internal)?),
                )
            }
            None => (None, None),
        };
        let translated = match &translator {
            Some(tr) => Some(
                B64.encode(
                    tr.translate(&out.manipulated_labels, &model.palette)
                        .and_then(|img| img.to_png_bytes())
                        .map_err(internal)?,
                ),
            ),
            None => None,
        };
        Ok(EditResponseWire {
            manipulated_color: B64.encode(out.manipulated_color.to_png_bytes().map_err(internal)?),
            manipulated_labels: B64.encode(out.manipulated_labels.to_png_bytes().map_err(internal)?),
            tiou: tiou_v,
            hamm: hamm_v,
            latency_ms: 0.0,
            translated_image: translated,
        })
    })
    .await
    .map_err(internal)??;
    Ok(Json(EditResponseWire {
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        ..response
    }))
}

async fn labels(State(state): State<Arc<AppState>>) -> Result<Json<ColorPalette>, ApiError> {
    state
        .palette()
        .map(Json)
        .ok_or_else(|| ApiError::status(StatusCode::SERVICE_UNAVAILABLE, "no palette loaded"))
}

#[derive(Debug, Deserialize)]
struct Page {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    100
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleList {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleWire {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub color_png: String,
    pub labels_png: String,
}

fn dataset(state: &AppState) -> Result<&Arc<Dataset>, ApiError> {
    state
        .dataset
        .as_ref()
        .ok_or_else(|| ApiError::status(StatusCode::NOT_FOUND, "no dataset mounted"))
}

async fn samples(State(state): State<Arc<AppState>>, Query(page): Query<Page>) -> Result<Json<SampleList>, ApiError> {
    let ds = dataset(&state)?;
    let ids = ds
        .records
        .iter()
        .skip(page.offset)
        .take(page.limit)
        .map(|r| r.name.clone())
        .collect();
    Ok(Json(SampleList {
        total: ds.len(),
        offset: page.offset,
        limit: page.limit,
        ids,
    }))
}

async fn sample(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SampleWire>, ApiError> {
    let ds = dataset(&state)?;
    let rec = ds
        .records
        .iter()
        .find(|r| r.name == id)
        .ok_or_else(|| ApiError::status(StatusCode::NOT_FOUND, format!("unknown sample {id:?}")))?;
    let color = color_encode(&rec.labels, &ds.palette).map_err(internal)?;
    Ok(Json(SampleWire {
        id: rec.name.clone(),
        height: rec.labels.height(),
        width: rec.labels.width(),
        color_png: B64.encode(color.to_png_bytes().map_err(internal)?),
        labels_png: B64.encode(rec.labels.to_png_bytes().map_err(internal)?),
    }))
}

const PLACEHOLDER_INDEX: &str = include_str!("../static/index.html");

/// All routes. With `static_dir` the editor bundle is served from there,
/// otherwise `/` answers with a placeholder page.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/edit", post(edit))
        .route("/api/labels", get(labels))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}", get(sample))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    }
}

pub async fn serve(state: Arc<AppState>, static_dir: Option<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, static_dir)).await
}
