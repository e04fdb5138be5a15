//! HTTP/JSON API. Images travel as base64-encoded PNG.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use semedit::image::{ImageTensor, Normalization};
use semedit::latent::{EditConfig, RoiId};
use semedit::pipeline::{edit, predict_roi_mask, style_swap, EditResult, RoiMask};

use crate::Models;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{field}: {message}")]
    BadField { field: &'static str, message: String },
    #[error("{field}: image is {got}x{got_w}, model expects {want}x{want}")]
    WrongSize { field: &'static str, got: usize, got_w: usize, want: usize },
    #[error("internal error {id}")]
    Internal { id: String },
}

impl ApiError {
    fn bad(field: &'static str, message: impl Into<String>) -> Self {
        ApiError::BadField { field, message: message.into() }
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        tracing::error!(%id, %detail, "request failed");
        ApiError::Internal { id }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self {
            ApiError::BadField { field, .. } => (StatusCode::BAD_REQUEST, json!({ "error": self.to_string(), "field": field })),
            ApiError::WrongSize { field, .. } => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": self.to_string(), "field": field })),
            ApiError::Internal { id } => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id })),
        };
        (status, Json(body)).into_response()
    }
}

/// Tint used for each region in mask overlays.
pub fn overlay_color(roi: RoiId) -> [u8; 3] {
    match roi {
        RoiId::Hair => [0, 0, 255],
        RoiId::Skin => [0, 255, 0],
        RoiId::Nose => [255, 0, 0],
        RoiId::Eyes => [255, 165, 0],
        RoiId::LipsMouth => [128, 128, 128],
    }
}

/// `x` with the masked pixels blended half-way towards the region's tint.
pub fn mask_overlay(x: &ImageTensor, mask: &RoiMask, roi: RoiId, norm: &Normalization) -> Vec<u8> {
    let tint = overlay_color(roi).map(|c| norm.to_model(c));
    let data = x
        .data()
        .chunks_exact(3)
        .zip(mask.data())
        .flat_map(|(p, &m)| (0..3).map(move |c| if m { 0.5 * (p[c] + tint[c]) } else { p[c] }))
        .collect();
    let (h, w) = x.dims();
    ImageTensor::new(h, w, data).expect("blend of in-range values").to_png_bytes(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatteStats {
    pub min: f32,
    pub max: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditResponse {
    pub edited: String,
    pub mask_overlay: String,
    pub mask: String,
    pub global_styled: String,
    pub matte_stats: MatteStats,
    pub timing_ms: f64,
    pub encoder_calls: usize,
    pub decoder_calls: usize,
}

type Shared = Arc<Models>;

pub fn router(models: Models) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(model_info))
        .route("/edit", post(edit_handler))
        .route("/segment", post(segment_handler))
        .with_state(Arc::new(models))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn model_info(State(models): State<Shared>) -> Json<Value> {
    let cfg = &models.smn.config;
    let phase = |m: &Option<semedit::checkpoint::Manifest>| m.as_ref().map(|m| json!({ "phase": m.phase, "step": m.step }));
    Json(json!({
        "image_size": cfg.image_size,
        "base_channels": cfg.base_channels,
        "structure_channels": cfg.structure_channels,
        "texture_dim": cfg.texture_dim,
        "slice_scheme": models.smpn.config.slice_scheme,
        "normalization": cfg.normalization,
        "rois": RoiId::ALL.iter().map(|r| json!({ "name": r.name(), "ordinal": r.ordinal() })).collect::<Vec<_>>(),
        "smn": phase(&models.smn_manifest),
        "smpn": phase(&models.smpn_manifest),
    }))
}

fn parse_body(body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::bad("body", "expected a JSON object")),
        Err(e) => Err(ApiError::bad("body", format!("invalid JSON: {e}"))),
    }
}

fn image_field(map: &Map<String, Value>, field: &'static str, models: &Models) -> Result<Option<ImageTensor>, ApiError> {
    let Some(v) = map.get(field).filter(|v| !v.is_null()) else {
        return Ok(None);
    };
    let text = v.as_str().ok_or_else(|| ApiError::bad(field, "expected a base64 string"))?;
    let bytes = STANDARD.decode(text.trim()).map_err(|e| ApiError::bad(field, format!("invalid base64: {e}")))?;
    let img = ImageTensor::from_png_bytes(&bytes, &models.smn.config.normalization)
        .map_err(|_| ApiError::bad(field, "not a decodable PNG image"))?;
    let n = models.image_size();
    if img.dims() != (n, n) {
        return Err(ApiError::WrongSize { field, got: img.height(), got_w: img.width(), want: n });
    }
    Ok(Some(img))
}

fn required_image(map: &Map<String, Value>, field: &'static str, models: &Models) -> Result<ImageTensor, ApiError> {
    image_field(map, field, models)?.ok_or_else(|| ApiError::bad(field, "missing"))
}

/// Validated `/edit` request.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: ImageTensor,
    pub roi: RoiId,
    pub mu: f64,
    pub seed: u64,
    pub style_image: Option<ImageTensor>,
}

impl EditRequest {
    pub fn parse(body: &[u8], models: &Models) -> Result<Self, ApiError> {
        let map = parse_body(body)?;
        let roi = match map.get("roi") {
            None | Some(Value::Null) => return Err(ApiError::bad("roi", "missing")),
            Some(Value::String(s)) => s.parse::<RoiId>().map_err(|e| ApiError::bad("roi", e.to_string()))?,
            Some(_) => return Err(ApiError::bad("roi", "expected a string")),
        };
        let mu = match map.get("mu") {
            None | Some(Value::Null) => 0.0,
            Some(v) => v.as_f64().filter(|m| m.is_finite() && *m >= 0.0).ok_or_else(|| ApiError::bad("mu", "expected a number >= 0"))?,
        };
        let seed = match map.get("seed") {
            None | Some(Value::Null) => 0,
            Some(v) => v.as_u64().ok_or_else(|| ApiError::bad("seed", "expected a nonnegative integer"))?,
        };
        let image = required_image(&map, "image", models)?;
        let style_image = image_field(&map, "style_image", models)?;
        Ok(Self { image, roi, mu, seed, style_image })
    }
}

/// Runs the request through the same pipeline entry points as the CLI.
pub fn run_edit(models: &Models, req: &EditRequest) -> semedit::Result<EditResult> {
    let scheme = &models.smpn.config.slice_scheme;
    match &req.style_image {
        Some(style) => style_swap(&models.smn, &models.smpn, &req.image, style, req.roi, scheme),
        None => edit(&models.smn, &models.smpn, &req.image, &EditConfig::new(req.roi, req.mu, req.seed)?, scheme),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn edit_handler(State(models): State<Shared>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    blocking(move || {
        let req = EditRequest::parse(&body, &models)?;
        let start = Instant::now();
        let result = run_edit(&models, &req).map_err(ApiError::internal)?;
        let timing_ms = start.elapsed().as_secs_f64() * 1000.0;
        let norm = &models.smn.config.normalization;
        let (min, max) = result.matte.min_max();
        Ok(Json(EditResponse {
            edited: STANDARD.encode(result.edited.to_png_bytes(norm)),
            mask_overlay: STANDARD.encode(mask_overlay(&req.image, &result.mask, req.roi, norm)),
            mask: STANDARD.encode(result.mask.to_png_bytes()),
            global_styled: STANDARD.encode(result.global_styled.to_png_bytes(norm)),
            matte_stats: MatteStats { min, max },
            timing_ms,
            encoder_calls: result.passes.encodes,
            decoder_calls: result.passes.decodes,
        }))
    })
    .await
}

async fn segment_handler(State(models): State<Shared>, body: Bytes) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        let map = parse_body(&body)?;
        let image = required_image(&map, "image", &models)?;
        let scheme = &models.smpn.config.slice_scheme;
        let mut masks = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for roi in RoiId::ALL {
            let mask = predict_roi_mask(&models.smpn, &image, roi, scheme).map_err(ApiError::internal)?;
            counts.insert(roi.name(), mask.count());
            masks.insert(roi.name(), STANDARD.encode(mask.to_png_bytes()));
        }
        Ok(Json(json!({ "masks": masks, "pixel_counts": counts })))
    })
    .await
}
