use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use mexgan::data::{color_decode, synthetic_dataset, ColorPalette, Dataset, LabelMap, RgbImage};
use mexgan::training::{GeneratorArch, TrainConfig, TrainState};
use mexgan_service::{router, AppState, EditResponseWire, GeneratorTranslator, Model, SampleList, SampleWire};
use serde_json::{json, Value};
use tower::ServiceExt;

fn model(seed: u64, palette: &ColorPalette) -> Model {
    let cfg = TrainConfig {
        seed,
        generator: GeneratorArch {
            downsamples: 1,
            res_blocks: 1,
            base_width: 4,
        },
        ..TrainConfig::default()
    };
    let state = TrainState::new(cfg, Some(palette.clone())).unwrap();
    Model {
        generator: state.models.generator,
        palette: palette.clone(),
    }
}

fn dataset() -> Dataset {
    synthetic_dataset(5, 24, 24, 3, false)
}

fn state_with(model_seed: Option<u64>) -> Arc<AppState> {
    let ds = dataset();
    let m = model_seed.map(|s| model(s, &ds.palette));
    Arc::new(AppState::new(m, Some(ds), None))
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post_edit(state: &Arc<AppState>, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/edit")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = call(router(state.clone(), None), req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn get(state: &Arc<AppState>, uri: &str) -> (StatusCode, Vec<u8>) {
    call(router(state.clone(), None), Request::get(uri).body(Body::empty()).unwrap()).await
}

fn target(p: &ColorPalette) -> u8 {
    p.editable_ids()[0]
}

fn label_map_b64(ds: &Dataset) -> String {
    B64.encode(ds.records[0].labels.to_png_bytes().unwrap())
}

#[tokio::test]
async fn edit_by_label_map_is_deterministic_and_keeps_context() {
    let state = state_with(Some(1));
    let ds = dataset();
    let body = json!({"label_map": label_map_b64(&ds), "box": [4, 5, 12, 15], "target_label": target(&ds.palette)});
    let (s1, a) = post_edit(&state, body.clone()).await;
    let (s2, b) = post_edit(&state, body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["manipulated_labels"], b["manipulated_labels"]);
    assert_eq!(a["manipulated_color"], b["manipulated_color"]);
    let a: EditResponseWire = serde_json::from_value(a).unwrap();
    assert!(a.tiou.is_none() && a.hamm.is_none() && a.translated_image.is_none());
    assert!(a.latency_ms >= 0.0);

    let out = LabelMap::from_png_bytes(&B64.decode(&a.manipulated_labels).unwrap()).unwrap();
    let orig = &ds.records[0].labels;
    for r in 0..24 {
        for c in 0..24 {
            if !(4..=12).contains(&r) || !(5..=15).contains(&c) {
                assert_eq!(out.get(r, c), orig.get(r, c));
            }
        }
    }
    let color = RgbImage::from_png_bytes(&B64.decode(&a.manipulated_color).unwrap()).unwrap();
    assert_eq!((color.height(), color.width()), (24, 24));
    assert_eq!(color_decode(&color, &ds.palette), out);
}

#[tokio::test]
async fn edit_by_sample_id_reports_metrics() {
    let state = state_with(Some(1));
    let ds = dataset();
    let id = ds.records[1].name.clone();
    let (s, v) = post_edit(&state, json!({"sample_id": id, "box": [0, 0, 10, 10], "target_label": target(&ds.palette)})).await;
    assert_eq!(s, StatusCode::OK);
    let h = v["hamm"].as_f64().unwrap();
    let t = v["tiou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&t));
}

#[tokio::test]
async fn edit_rejects_bad_fields() {
    let state = state_with(Some(1));
    let ds = dataset();
    let lm = label_map_b64(&ds);
    let t = target(&ds.palette);
    let fixed = ds.palette.categories.iter().find(|c| !c.editable).unwrap().id;
    let cases = [
        (json!({"label_map": lm, "box": [4, 5, 40, 15], "target_label": t}), "box"),
        (json!({"label_map": lm, "box": [8, 5, 4, 15], "target_label": t}), "box"),
        (json!({"label_map": lm, "box": [4, 5, 8], "target_label": t}), "box"),
        (json!({"label_map": lm, "box": [4, 5, 8, 9], "target_label": fixed}), "target_label"),
        (json!({"label_map": lm, "box": [4, 5, 8, 9], "target_label": 999}), "target_label"),
        (json!({"label_map": "%%%", "box": [4, 5, 8, 9], "target_label": t}), "label_map"),
        (json!({"box": [4, 5, 8, 9], "target_label": t}), "label_map"),
        (json!({"sample_id": "nope", "box": [4, 5, 8, 9], "target_label": t}), "sample_id"),
        (json!({"label_map": lm, "box": [4, 5, 8, 9]}), "body"),
    ];
    for (body, field) in cases {
        let (s, v) = post_edit(&state, body.clone()).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["field"], field, "{body}");
    }
}

#[tokio::test]
async fn no_model_is_unavailable_and_swap_takes_effect() {
    let state = state_with(None);
    let ds = dataset();
    let body = json!({"label_map": label_map_b64(&ds), "box": [4, 5, 12, 15], "target_label": target(&ds.palette)});
    let (s, _) = post_edit(&state, body.clone()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    state.swap_model(Some(model(1, &ds.palette)));
    let (s, a) = post_edit(&state, body.clone()).await;
    assert_eq!(s, StatusCode::OK);
    state.swap_model(Some(model(2, &ds.palette)));
    let (_, b) = post_edit(&state, body).await;
    assert_ne!(a["manipulated_color"], b["manipulated_color"]);
}

#[tokio::test]
async fn concurrent_edits_match_serial() {
    let state = state_with(Some(1));
    let ds = dataset();
    let t = target(&ds.palette);
    let bodies: Vec<Value> = ds
        .records
        .iter()
        .map(|r| json!({"sample_id": r.name, "box": [2, 3, 14, 17], "target_label": t}))
        .collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(post_edit(&state, b.clone()).await.1["manipulated_labels"].clone());
    }
    let handles: Vec<_> = bodies
        .into_iter()
        .map(|b| {
            let st = state.clone();
            tokio::spawn(async move { post_edit(&st, b).await.1["manipulated_labels"].clone() })
        })
        .collect();
    for (h, expect) in handles.into_iter().zip(serial) {
        assert_eq!(h.await.unwrap(), expect);
    }
}

#[tokio::test]
async fn translator_output_is_included() {
    let ds = dataset();
    let tr = GeneratorTranslator {
        generator: model(5, &ds.palette).generator,
    };
    let state = Arc::new(AppState::new(Some(model(1, &ds.palette)), Some(ds.clone()), Some(Arc::new(tr))));
    let (s, v) = post_edit(&state, json!({"label_map": label_map_b64(&ds), "box": [4, 5, 12, 15], "target_label": target(&ds.palette)})).await;
    assert_eq!(s, StatusCode::OK);
    let img = RgbImage::from_png_bytes(&B64.decode(v["translated_image"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((img.height(), img.width()), (24, 24));
}

#[tokio::test]
async fn labels_and_samples() {
    let state = state_with(Some(1));
    let ds = dataset();
    let (s, body) = get(&state, "/api/labels").await;
    assert_eq!(s, StatusCode::OK);
    let p: ColorPalette = serde_json::from_slice(&body).unwrap();
    assert_eq!(p, ds.palette);
    assert!(p.categories.windows(2).all(|w| w[0].id < w[1].id));

    let (s, body) = get(&state, "/api/samples?offset=1&limit=2").await;
    assert_eq!(s, StatusCode::OK);
    let list: SampleList = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.total, 5);
    assert_eq!(list.ids, vec![ds.records[1].name.clone(), ds.records[2].name.clone()]);

    let (s, body) = get(&state, &format!("/api/samples/{}", ds.records[3].name)).await;
    assert_eq!(s, StatusCode::OK);
    let sample: SampleWire = serde_json::from_slice(&body).unwrap();
    let labels = LabelMap::from_png_bytes(&B64.decode(&sample.labels_png).unwrap()).unwrap();
    assert_eq!(labels, ds.records[3].labels);

    let (s, _) = get(&state, "/api/samples/missing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_root() {
    let state = state_with(None);
    let (s, body) = get(&state, "/").await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api/edit"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>bundle</p>").unwrap();
    let app = router(state, Some(dir.path().to_path_buf()));
    let (s, body) = call(app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<p>bundle</p>");
}
