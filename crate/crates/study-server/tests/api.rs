use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use genforge::data::{decode_pgm16, save_set, ImageSet};
use genforge::study::{SessionStore, SourceGroup};
use genforge_study_server::router;
use serde_json::{json, Value};
use tower::ServiceExt;

const GROUP_NAMES: [&str; 5] = ["original", "vanilla_vae", "dfc_vae", "intro_vae", "style_gan"];

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    for (k, g) in SourceGroup::ALL.iter().enumerate() {
        let set = ImageSet::new(4, 4, vec![0.1 + 0.2 * k as f64; 16 * 6]).unwrap();
        save_set(dir.path().join(format!("{g}.imgset")), &set).unwrap();
    }
    let store = Arc::new(SessionStore::open(dir.path()).unwrap());
    Fixture { app: router(store, None), _dir: dir }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn create(app: &Router, n: usize) -> String {
    let fakes: serde_json::Map<String, Value> =
        GROUP_NAMES[1..].iter().map(|g| (g.to_string(), json!(format!("{g}.imgset")))).collect();
    let (s, v) = call(app, "POST", "/sessions", Some(json!({"real": "original.imgset", "fakes": fakes, "n_per_group": n, "seed": 7}))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["n_items"], 5 * n);
    v["session_id"].as_str().unwrap().to_string()
}

fn assert_blind(v: &Value) {
    let text = v.to_string();
    for g in GROUP_NAMES {
        assert!(!text.contains(g), "{g} leaked in {text}");
    }
}

#[tokio::test]
async fn reader_flow_round_trip() {
    let f = fixture();
    let id = create(&f.app, 2).await;

    let (s, v) = call(&f.app, "GET", &format!("/sessions/{id}/next?reader=r1"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_blind(&v);
    assert_eq!(v["progress"], json!({"answered": 0, "total": 10}));
    let pgm = base64::engine::general_purpose::STANDARD.decode(v["image"].as_str().unwrap()).unwrap();
    let (h, w, px) = decode_pgm16::<f64>(&pgm).unwrap();
    assert_eq!((h, w, px.len()), (4, 4, 16));
    let item = v["item_id"].as_str().unwrap().to_string();

    let body = json!({"reader_id": "r1", "item_id": item, "label": "fake"});
    let (s, v) = call(&f.app, "POST", &format!("/sessions/{id}/responses"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_blind(&v);
    assert_eq!(v["progress"]["answered"], 1);

    let (s, v) = call(&f.app, "POST", &format!("/sessions/{id}/responses"), Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "conflict");

    let again = json!({"reader_id": "r1", "item_id": item, "label": "real", "overwrite": true});
    let (s, _) = call(&f.app, "POST", &format!("/sessions/{id}/responses"), Some(again)).await;
    assert_eq!(s, StatusCode::CREATED);

    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}/next?reader=r1"), None).await;
    assert_ne!(v["item_id"].as_str().unwrap(), item);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let f = fixture();
    let id = create(&f.app, 1).await;
    let (s, v) = call(&f.app, "GET", "/sessions/nope/next?reader=a", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "not_found");
    let bad = json!({"reader_id": "a", "item_id": "0000", "label": "real"});
    let (s, _) = call(&f.app, "POST", &format!("/sessions/{id}/responses"), Some(bad)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&f.app, "POST", "/sessions", Some(json!({"real": "original.imgset", "n_per_group": 99}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["kind"], "invalid_input");
    let (s, _) = call(&f.app, "POST", "/sessions", Some(json!({"real": "missing.imgset"}))).await;
    assert!(s.is_client_error() || s.is_server_error());
}

#[tokio::test]
async fn report_is_blind_until_asked() {
    let f = fixture();
    let id = create(&f.app, 1).await;
    let (s, v) = call(&f.app, "GET", &format!("/sessions/{id}/report"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["partial"], true);
    assert_eq!(v["confusion_tables"], json!([]));
    assert!(v.get("items").is_none());

    for reader in ["a", "b"] {
        loop {
            let (_, n) = call(&f.app, "GET", &format!("/sessions/{id}/next?reader={reader}"), None).await;
            if n["done"] == true {
                break;
            }
            let body = json!({"reader_id": reader, "item_id": n["item_id"], "label": "real"});
            call(&f.app, "POST", &format!("/sessions/{id}/responses"), Some(body)).await;
        }
    }
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}/report?unblind=false"), None).await;
    assert_eq!(v["partial"], false);
    assert_eq!(v["kappa"].as_array().unwrap().len(), 1);
    assert_eq!(v["kappa"][0]["kappa"], 1.0);
    assert_blind(&v["readers"]);
    let (_, v) = call(&f.app, "GET", &format!("/sessions/{id}/report?unblind=true"), None).await;
    assert_eq!(v["items"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>ok</html>").unwrap();
    let store = Arc::new(SessionStore::open(dir.path().join("data")).unwrap());
    let app = router(store, Some(&ui));
    let resp = app.oneshot(Request::get("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}
