use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pxpo_core::harness::{EpochRecord, RunDir, ScriptedPainter, TrainConfig};
use pxpo_core::net::DenoiserParams;
use pxpo_core::grid::Grid;
use pxpo_service::{router, FeedbackAck, FeedbackBody, RecordView, SampleView, ServiceConfig, SessionView};
use serde::de::DeserializeOwned;
use tower::ServiceExt;

fn config(size: usize, channels: usize, run_root: Option<&Path>) -> ServiceConfig {
    let mut train = TrainConfig::preset("human").unwrap();
    train.image_height = size;
    train.image_width = size;
    train.base_channels = channels;
    train.time_dim = 4;
    train.train_steps = 10;
    train.rollout_steps = 4;
    train.lr = 0.01;
    train.seed = 5;
    let params = DenoiserParams::init(train.net_spec(), 2).unwrap();
    ServiceConfig {
        train,
        params,
        run_root: run_root.map(Path::to_path_buf),
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Vec<u8>, content_type: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", content_type)
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

fn json<T: DeserializeOwned>(body: &[u8]) -> T {
    serde_json::from_slice(body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(body)))
}

async fn create(app: &Router) -> SessionView {
    let (status, body) = post(app, "/api/v1/session", Vec::new(), "application/json").await;
    assert_eq!(status, StatusCode::OK);
    json(&body)
}

fn image_of(view: &SampleView) -> Grid {
    let bytes = view.decode_pixels().unwrap();
    let n = view.height * view.width;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = bytes[3 * i + c] as f64 / 255.0;
        }
    }
    Grid::from_vec(3, view.height, view.width, data).unwrap()
}

#[tokio::test]
async fn health_and_sessions() {
    let app = router(config(8, 4, None));
    let (status, body) = get(&app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = json(&body);
    assert_eq!(v["status"], "ok");

    let s = create(&app).await;
    assert_eq!((s.epoch, s.height, s.width), (0, 8, 8));
    let (status, _) = post(&app, "/api/v1/session", Vec::new(), "application/json").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let (status, _) = get(&app, "/api/v1/session/nope/sample").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/api/v1/session/nope/history").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = get(&app, &format!("/api/v1/session/{}/history", s.id)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(json::<Vec<RecordView>>(&body).is_empty());

    let (status, _) = send(&app, Request::delete(format!("/api/v1/session/{}", s.id)).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let again = create(&app).await;
    assert_ne!(again.id, s.id);
}

#[tokio::test]
async fn sample_feedback_step_cycle() {
    let app = router(config(8, 4, None));
    let s = create(&app).await;
    let base = format!("/api/v1/session/{}", s.id);

    let (status, a) = get(&app, &format!("{base}/sample")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = get(&app, &format!("{base}/sample")).await;
    assert_eq!(a, b);
    let first: SampleView = json(&a);
    assert_eq!((first.epoch, first.height, first.width, first.encoding.as_str()), (0, 8, 8, "rgb8"));
    assert_eq!(first.decode_pixels().unwrap().len(), 8 * 8 * 3);

    let (status, _) = post(&app, &format!("{base}/step"), Vec::new(), "application/json").await;
    assert_eq!(status, StatusCode::CONFLICT);

    let octet = "application/octet-stream";
    let (status, _) = post(&app, &format!("{base}/feedback"), vec![0; 63], octet).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, &format!("{base}/feedback"), vec![3; 64], octet).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, &format!("{base}/feedback"), b"{\"mask\": 5}".to_vec(), "application/json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, &format!("{base}/feedback"), b"{\"mask\": \"***\"}".to_vec(), "application/json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // Neutral feedback twice: zero gradient, so the fixed-seed image stays put.
    for epoch in 0..2 {
        let body = serde_json::to_vec(&FeedbackBody::new(&[0; 64])).unwrap();
        let (status, ack) = post(&app, &format!("{base}/feedback"), body, "application/json").await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(json::<FeedbackAck>(&ack), FeedbackAck { session: s.id.clone(), epoch, pending: true });
        let (status, rec) = post(&app, &format!("{base}/step"), Vec::new(), "application/json").await;
        assert_eq!(status, StatusCode::OK);
        let rec: RecordView = json(&rec);
        assert_eq!((rec.epoch, rec.mean_reward), (epoch, 0.0));
        let (_, now) = get(&app, &format!("{base}/sample")).await;
        let now: SampleView = json(&now);
        assert_eq!(now.pixels, first.pixels);
        assert_eq!(now.epoch, epoch + 1);
    }
    let (_, h) = get(&app, &format!("{base}/history")).await;
    assert_eq!(json::<Vec<RecordView>>(&h).len(), 2);
}

#[tokio::test]
async fn scripted_painter_runs_fifteen_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(config(8, 4, Some(dir.path())));
    let s = create(&app).await;
    let base = format!("/api/v1/session/{}", s.id);
    let painter = ScriptedPainter::default();
    for _ in 0..15 {
        let (_, body) = get(&app, &format!("{base}/sample")).await;
        let mask = painter.paint(&image_of(&json(&body))).unwrap();
        let (status, _) = post(&app, &format!("{base}/feedback"), mask, "application/octet-stream").await;
        assert_eq!(status, StatusCode::OK);
        let (status, _) = post(&app, &format!("{base}/step"), Vec::new(), "application/json").await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, h) = get(&app, &format!("{base}/history")).await;
    let history: Vec<RecordView> = json(&h);
    assert_eq!(history.len(), 15);
    let on_disk = RunDir { root: dir.path().join(&s.id) }.read_records().unwrap();
    let served: Vec<EpochRecord> = history.iter().map(EpochRecord::from).collect();
    assert_eq!(on_disk, served);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn feedback_during_a_step_is_rejected() {
    let mut cfg = config(24, 32, None);
    cfg.train.train_steps = 50;
    cfg.train.rollout_steps = 20;
    let app = router(cfg);
    let s = create(&app).await;
    let base = format!("/api/v1/session/{}", s.id);
    let mask = vec![1u8; 24 * 24];
    let (status, _) = post(&app, &format!("{base}/feedback"), mask.clone(), "application/octet-stream").await;
    assert_eq!(status, StatusCode::OK);

    let stepping = {
        let app = app.clone();
        let uri = format!("{base}/step");
        tokio::spawn(async move { post(&app, &uri, Vec::new(), "application/json").await })
    };
    tokio::time::sleep(std::time::Duration::from_millis(30)).await;
    let (during, _) = post(&app, &format!("{base}/feedback"), mask.clone(), "application/octet-stream").await;
    let (second_step, _) = post(&app, &format!("{base}/step"), Vec::new(), "application/json").await;
    let (status, _) = stepping.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(during, StatusCode::CONFLICT);
    assert_eq!(second_step, StatusCode::CONFLICT);
}

#[test]
fn feedback_body_seeds_replay() {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/feedback_body");
    let mut ok = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let data = std::fs::read(&path).unwrap();
        if let Ok(mask) = pxpo_service::decode_feedback(Some("application/json"), &data) {
            if pxpo_core::rewards::decode_human_mask(&mask, 24, 24).is_ok() {
                ok.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
    }
    assert_eq!(ok, ["painted"]);
}
