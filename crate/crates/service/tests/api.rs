use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use semedit::image::ImageTensor;
use semedit::latent::{EditConfig, RoiId};
use semedit::networks::{AutoencoderParams, ModelConfig};
use semedit::pipeline::edit;
use semedit_service::{api, Models};

fn models() -> Models {
    let cfg = ModelConfig::new(32, 8);
    Models::new(AutoencoderParams::init(&cfg, 1), AutoencoderParams::init(&cfg, 2)).unwrap()
}

fn image(n: usize) -> ImageTensor {
    let data = (0..n * n * 3).map(|i| ((i * 37 % 255) as f32 / 127.5) - 1.0).collect();
    ImageTensor::new(n, n, data).unwrap()
}

fn png_b64(n: usize) -> String {
    STANDARD.encode(image(n).to_png_bytes(&Default::default()))
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = api::router(models()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn health_is_ok() {
    let (status, body) = call("GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "status": "ok" }));
}

#[tokio::test]
async fn model_info_lists_regions_and_scheme() {
    let (status, body) = call("GET", "/model/info", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["image_size"], 32);
    assert_eq!(body["rois"].as_array().unwrap().len(), 5);
    assert!(body["slice_scheme"].is_object());
    assert!(body["normalization"].is_object());
}

#[tokio::test]
async fn edit_matches_library_pipeline() {
    let (status, body) = call("POST", "/edit", Some(json!({ "image": png_b64(32), "roi": "hair", "mu": 0.5, "seed": 7 }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let m = models();
    let x = ImageTensor::from_png_bytes(&STANDARD.decode(png_b64(32)).unwrap(), &Default::default()).unwrap();
    let r = edit(&m.smn, &m.smpn, &x, &EditConfig::new(RoiId::Hair, 0.5, 7).unwrap(), &m.smpn.config.slice_scheme).unwrap();
    assert_eq!(body["edited"], STANDARD.encode(r.edited.to_png_bytes(&Default::default())));
    assert_eq!(body["mask"], STANDARD.encode(r.mask.to_png_bytes()));
    assert_eq!(body["decoder_calls"], 2);
    assert_eq!(body["encoder_calls"], 2);
    for key in ["mask_overlay", "global_styled"] {
        let png = STANDARD.decode(body[key].as_str().unwrap()).unwrap();
        assert_eq!(ImageTensor::from_png_bytes(&png, &Default::default()).unwrap().dims(), (32, 32));
    }
    let (lo, hi) = (body["matte_stats"]["min"].as_f64().unwrap(), body["matte_stats"]["max"].as_f64().unwrap());
    assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
    assert!(body["timing_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn style_image_switches_to_swap() {
    let (status, body) =
        call("POST", "/edit", Some(json!({ "image": png_b64(32), "style_image": png_b64(32), "roi": "lips_mouth" }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["encoder_calls"], 3);
    assert_eq!(body["decoder_calls"], 2);
}

#[tokio::test]
async fn bad_fields_are_reported_by_name() {
    let cases = [
        (json!({ "roi": "hair" }), "image"),
        (json!({ "image": png_b64(32) }), "roi"),
        (json!({ "image": png_b64(32), "roi": "ears" }), "roi"),
        (json!({ "image": png_b64(32), "roi": "hair", "mu": -1.0 }), "mu"),
        (json!({ "image": png_b64(32), "roi": "hair", "seed": "x" }), "seed"),
        (json!({ "image": "not base64!", "roi": "hair" }), "image"),
        (json!({ "image": STANDARD.encode(b"not a png"), "roi": "hair" }), "image"),
        (json!([1, 2]), "body"),
    ];
    for (req, field) in cases {
        let (status, body) = call("POST", "/edit", Some(req.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{req}");
        assert_eq!(body["field"], field, "{req}");
        assert!(body["error"].is_string());
    }
}

#[tokio::test]
async fn wrong_size_is_unprocessable() {
    let (status, body) = call("POST", "/edit", Some(json!({ "image": png_b64(16), "roi": "skin" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "image");
    let (status, _) = call("POST", "/segment", Some(json!({ "image": png_b64(64) }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn segment_returns_every_region() {
    let (status, body) = call("POST", "/segment", Some(json!({ "image": png_b64(32) }))).await;
    assert_eq!(status, StatusCode::OK);
    for roi in RoiId::ALL {
        let png = STANDARD.decode(body["masks"][roi.name()].as_str().unwrap()).unwrap();
        assert_eq!(png_dims(&png), (32, 32));
        assert!(body["pixel_counts"][roi.name()].as_u64().unwrap() <= 32 * 32);
    }
}

fn png_dims(png: &[u8]) -> (u32, u32) {
    // PNG IHDR: width and height are big-endian u32 at byte 16 and 20.
    let be = |i: usize| u32::from_be_bytes(png[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}
