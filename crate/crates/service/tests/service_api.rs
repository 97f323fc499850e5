mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use rtgrasp_core::client::ModelClient;
use rtgrasp_core::cornell::{load_dataset, split_folds, CategoryMap, CornellSample, SplitMode};
use rtgrasp_core::eval::MockModel;
use rtgrasp_core::geometry::{pose_to_rect, rect_to_pose, GraspPose};
use rtgrasp_core::templates::quantize_pose;
use rtgrasp_service::server::{router, AppState, ImageIndex, ServiceConfig};

fn samples() -> Vec<CornellSample> {
    load_dataset(&common::fixture_root(), &CategoryMap::seed()).unwrap().samples
}

fn gt_pose(s: &CornellSample) -> GraspPose {
    quantize_pose(&rect_to_pose(&s.positive_rects[0], s.width as f64, s.height as f64).unwrap())
}

fn app_with(client: impl ModelClient + 'static, config: ServiceConfig) -> Router {
    let s = samples();
    let folds = split_folds(&s, SplitMode::ImageWise, 3, 1).unwrap();
    let index = ImageIndex::from_cornell(&s, Some(&folds));
    router(Arc::new(AppState::new(index, Arc::new(client), config).unwrap()))
}

fn app(client: impl ModelClient + 'static) -> Router {
    app_with(client, ServiceConfig::default())
}

fn oracle() -> MockModel {
    MockModel::oracle(samples().iter().map(|s| (s.image_id.clone(), gt_pose(s))).collect())
}

fn scripted() -> MockModel {
    MockModel::scripted_turns(vec![
        "The mug body is a cylinder, so close across it. {0.60, 0.40, 0.000}".into(),
        "The handle is easier to hold. {0.30, 0.40, 1.000}".into(),
        "Lower on the handle. {0.30, 0.45, 1.000}".into(),
    ])
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn pose_of(v: &Value) -> Option<GraspPose> {
    serde_json::from_value(v.clone()).ok()
}

fn assert_overlay_matches(body: &Value, width: f64, height: f64) {
    let pose = pose_of(&body["pose"]).expect("pose present");
    let rect = pose_to_rect(&pose, 150.0, 60.0, width, height).unwrap();
    let got = body["overlay"]["vertices"].as_array().unwrap();
    for (v, g) in rect.vertices().iter().zip(got) {
        assert!((v.x - g[0].as_f64().unwrap()).abs() < 1e-6);
        assert!((v.y - g[1].as_f64().unwrap()).abs() < 1e-6);
    }
}

#[tokio::test]
async fn healthz() {
    let (status, body) = call(&app(oracle()), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn samples_filter_by_fold() {
    let app = app(oracle());
    let (_, all) = call(&app, "GET", "/api/samples", None).await;
    assert_eq!(all.as_array().unwrap().len(), 6);
    let mut seen = 0;
    for f in 0..3 {
        let (status, fold) = call(&app, "GET", &format!("/api/samples?fold={f}"), None).await;
        assert_eq!(status, StatusCode::OK);
        for e in fold.as_array().unwrap() {
            assert_eq!(e["fold"], f);
            seen += 1;
        }
    }
    assert_eq!(seen, 6);
}

#[tokio::test]
async fn fold_filter_needs_an_assignment() {
    let index = ImageIndex::from_cornell(&samples(), None);
    let app = router(Arc::new(AppState::new(index, Arc::new(oracle()), ServiceConfig::default()).unwrap()));
    let (status, _) = call(&app, "GET", "/api/samples?fold=0", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn image_bytes_and_404() {
    let app = app(oracle());
    let resp = app
        .clone()
        .oneshot(Request::get("/api/image/pcd0100").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], &std::fs::read(common::fixture_root().join("pcd0100r.png")).unwrap()[..]);
    let (status, _) = call(&app, "GET", "/api/image/pcd9999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn predict_with_oracle_returns_ground_truth_and_overlay() {
    let app = app(oracle());
    for s in samples() {
        let (status, body) = call(&app, "POST", "/api/predict", Some(json!({"image_id": s.image_id}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(pose_of(&body["pose"]), Some(gt_pose(&s)));
        assert!(!body["reasoning"].as_str().unwrap().is_empty());
        assert_overlay_matches(&body, s.width as f64, s.height as f64);
    }
}

#[tokio::test]
async fn predict_unknown_image_is_404() {
    let (status, _) = call(&app(oracle()), "POST", "/api/predict", Some(json!({"image_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unparseable_reply_is_200_without_pose() {
    let (status, body) = call(&app(MockModel::gibberish()), "POST", "/api/predict", Some(json!({"image_id": "pcd0101"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["pose"].is_null());
    assert!(body["overlay"].is_null());
    assert!(!body["diagnostics"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn endpoint_failure_is_502() {
    let (status, body) = call(&app(MockModel::failing()), "POST", "/api/predict", Some(json!({"image_id": "pcd0101"}))).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(body["error"].as_str().unwrap().contains("unreachable"));
}

#[tokio::test]
async fn predict_accepts_uploads() {
    let bytes = std::fs::read(common::fixture_root().join("pcd0102r.png")).unwrap();
    let upload = base64::engine::general_purpose::STANDARD.encode(bytes);
    let client = MockModel::constant(GraspPose::new(0.25, 0.5, 0.3).unwrap());
    let (status, body) = call(&app(client), "POST", "/api/predict", Some(json!({"upload": upload}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["width"].as_u64(), body["height"].as_u64()), (Some(640), Some(480)));
    assert_overlay_matches(&body, 640.0, 480.0);

    let (status, _) = call(&app(oracle()), "POST", "/api/predict", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn refinement_appends_and_marks_overlays() {
    let app = app(scripted());
    let (status, created) = call(&app, "POST", "/api/session", Some(json!({"image_id": "pcd0100"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["session_id"].as_str().unwrap().to_string();
    assert_eq!(pose_of(&created["pose"]), Some(GraspPose::new(0.6, 0.4, 0.0).unwrap()));
    assert_eq!(created["history"].as_array().unwrap().len(), 2);

    let uri = format!("/api/session/{id}/refine");
    let (status, refined) = call(&app, "POST", &uri, Some(json!({"message": "grasp the handle instead"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(refined["history"].as_array().unwrap().len(), 4);
    assert_eq!(pose_of(&refined["pose"]), Some(GraspPose::new(0.3, 0.4, 1.0).unwrap()));
    assert_overlay_matches(&refined, 640.0, 480.0);

    let overlays = refined["overlays"].as_array().unwrap();
    let roles: Vec<(&str, bool)> = overlays
        .iter()
        .map(|o| (o["role"].as_str().unwrap(), o["latest"].as_bool().unwrap()))
        .collect();
    assert_eq!(roles, [("initial", false), ("refined", true)]);

    let (status, fetched) = call(&app, "GET", &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched["history"], refined["history"]);
}

#[tokio::test]
async fn refinement_with_unparseable_reply_keeps_history() {
    let client = MockModel::scripted_turns(vec!["{0.5, 0.5, 0.0}".into(), "I am not sure what you mean.".into()]);
    let app = app(client);
    let (_, created) = call(&app, "POST", "/api/session", Some(json!({"image_id": "pcd0100"}))).await;
    let id = created["session_id"].as_str().unwrap();
    let (status, body) = call(&app, "POST", &format!("/api/session/{id}/refine"), Some(json!({"message": "move"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["pose"].is_null());
    assert_eq!(body["history"].as_array().unwrap().len(), 4);
    assert_eq!(body["overlays"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app(scripted());
    let (status, _) = call(&app, "GET", "/api/session/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/api/session/missing/refine", Some(json!({"message": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/api/session", Some(json!({"image_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_refinements_conflict() {
    let app = app(scripted().with_delay(Duration::from_millis(300)));
    let (_, created) = call(&app, "POST", "/api/session", Some(json!({"image_id": "pcd0100"}))).await;
    let uri = format!("/api/session/{}/refine", created["session_id"].as_str().unwrap());
    let first = call(&app, "POST", &uri, Some(json!({"message": "one"})));
    let second = async {
        tokio::time::sleep(Duration::from_millis(50)).await;
        call(&app, "POST", &uri, Some(json!({"message": "two"}))).await
    };
    let ((s1, b1), (s2, _)) = tokio::join!(first, second);
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::CONFLICT));
    assert_eq!(b1["history"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        session_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let first = app_with(scripted(), config.clone());
    let (_, created) = call(&first, "POST", "/api/session", Some(json!({"image_id": "pcd0100"}))).await;
    let id = created["session_id"].as_str().unwrap().to_string();
    let (_, refined) = call(&first, "POST", &format!("/api/session/{id}/refine"), Some(json!({"message": "handle"}))).await;
    assert!(Path::new(&dir.path().join(format!("{id}.json"))).exists());

    let second = app_with(scripted(), config);
    let (status, reloaded) = call(&second, "GET", &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reloaded["history"], refined["history"]);
    assert_eq!(reloaded["overlays"].as_array().unwrap().len(), 2);
}
