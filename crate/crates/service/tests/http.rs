use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use moral_align_core::annotation::{plan_batches, BatchPlan, PlanConfig};
use moral_align_core::KvConfig;
use moral_align_service::{router, AppState, ServiceConfig, DEFAULT_INSTRUCTIONS};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

const PNG: &[u8] = b"\x89PNG\r\n\x1a\nnot really a png";

struct Fixture {
    dir: TempDir,
    cfg: ServiceConfig,
    plan: BatchPlan,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let ids: Vec<String> = (0..6).map(|i| format!("img{i}")).collect();
        let plan = plan_batches(
            &ids,
            &PlanConfig {
                n_batches: 2,
                per_batch: 3,
                annotators_per_batch: 2,
                seed: 5,
            },
        )
        .unwrap();
        let plan_path = dir.path().join("plan.json");
        plan.write(&plan_path).unwrap();
        let image_dir = dir.path().join("images");
        std::fs::create_dir(&image_dir).unwrap();
        for id in &ids {
            std::fs::write(image_dir.join(format!("{id}.png")), PNG).unwrap();
        }
        let cfg = ServiceConfig {
            image_dir,
            plan_path,
            store_path: dir.path().join("ratings.jsonl"),
            ..ServiceConfig::default()
        };
        Fixture { dir, cfg, plan }
    }

    fn app(&self) -> Router {
        router(Arc::new(AppState::open(&self.cfg).unwrap()))
    }

    fn annotator(&self, batch: usize) -> (&str, &[String]) {
        let b = &self.plan.batches[batch];
        (&b.annotator_ids[0], &b.image_ids)
    }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: &Value) -> (StatusCode, Value) {
    let req = Request::post("/ratings")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn rating(annotator: &str, image: &str, care: &str) -> Value {
    json!({
        "annotator_id": annotator,
        "image_id": image,
        "ratings": {
            "care": care, "fairness": "neutral", "ingroup": "neutral",
            "authority": "vice", "purity": "neutral"
        },
        "note": "looks fine"
    })
}

fn as_json(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn instructions_default_and_configured() {
    let fx = Fixture::new();
    let (s, b) = get(&fx.app(), "/instructions").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(b).unwrap(), DEFAULT_INSTRUCTIONS);

    let doc = fx.dir.path().join("guide.md");
    std::fs::write(&doc, "# Custom guide\n").unwrap();
    let cfg = ServiceConfig {
        instructions_path: Some(doc),
        ..fx.cfg.clone()
    };
    let app = router(Arc::new(AppState::open(&cfg).unwrap()));
    let (_, b) = get(&app, "/instructions").await;
    assert_eq!(b, b"# Custom guide\n");
}

#[tokio::test]
async fn task_flow_through_a_batch() {
    let fx = Fixture::new();
    let app = fx.app();
    let (ann, images) = fx.annotator(0);
    let uri = format!("/tasks/next?annotator={ann}");

    let (s, b) = get(&app, &uri).await;
    assert_eq!(s, StatusCode::OK);
    let task = as_json(&b);
    assert_eq!(task["image_id"], images[0].as_str());
    assert_eq!(task["image_url"], format!("/images/{}", images[0]));
    assert_eq!(task["foundations"].as_array().unwrap().len(), 5);
    assert_eq!(task["progress"]["rated"], 0);
    // repeated requests without a submission issue the same task
    assert_eq!(as_json(&get(&app, &uri).await.1), task);

    for (k, img) in images.iter().enumerate() {
        let (s, rec) = post(&app, &rating(ann, img, "virtue")).await;
        assert_eq!(s, StatusCode::CREATED, "{rec}");
        assert_eq!(rec["image_id"], img.as_str());
        let (_, p) = get(&app, &format!("/progress?annotator={ann}")).await;
        let p = as_json(&p);
        assert_eq!(p["rated"], k + 1);
        assert_eq!(p["total"], images.len());
        assert!((p["fraction"].as_f64().unwrap() - (k + 1) as f64 / 3.0).abs() < 1e-12);
    }
    let (s, b) = get(&app, &uri).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(b.is_empty());
}

#[tokio::test]
async fn query_and_annotator_errors() {
    let fx = Fixture::new();
    let app = fx.app();
    let (s, b) = get(&app, "/tasks/next").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(as_json(&b)["field"], "annotator");
    let (s, _) = get(&app, "/tasks/next?annotator=nobody").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&app, "/progress?annotator=nobody").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rating_validation_names_the_field() {
    let fx = Fixture::new();
    let app = fx.app();
    let (ann, images) = fx.annotator(0);
    let (_, other_images) = fx.annotator(1);

    let (s, b) = post(&app, &rating(ann, &images[0], "maybe")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(b["field"], "ratings.care");

    let mut missing = rating(ann, &images[0], "vice");
    missing["ratings"].as_object_mut().unwrap().remove("purity");
    let (s, b) = post(&app, &missing).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(b["field"], "ratings.purity");

    let (s, b) = post(&app, &rating(ann, &other_images[0], "vice")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(b["field"], "image_id");

    let (s, _) = post(&app, &rating("nobody", &images[0], "vice")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, b) = post(&app, &json!({"annotator_id": ann})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(b["error"].as_str().unwrap().contains("image_id"));

    let req = Request::post("/ratings")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::BAD_REQUEST);

    // nothing was stored
    let (_, csv) = get(&app, "/export").await;
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1);
}

#[tokio::test]
async fn export_keeps_the_latest_submission() {
    let fx = Fixture::new();
    let app = fx.app();
    let (_, b) = get(&app, "/export").await;
    assert_eq!(
        String::from_utf8(b).unwrap(),
        "image_id,annotator_id,label,note,submitted_at\n"
    );

    let (ann, images) = fx.annotator(0);
    let second = &fx.plan.batches[0].annotator_ids[1];
    post(&app, &rating(ann, &images[0], "virtue")).await;
    post(&app, &rating(second, &images[0], "neutral")).await;
    post(&app, &rating(ann, &images[0], "vice")).await;

    let (s, b) = get(&app, "/export").await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(b).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    let mine = rows.iter().find(|r| r.contains(ann)).unwrap();
    assert!(mine.starts_with(&format!("{},{ann},xnnxn,looks fine,", images[0])));
    let theirs = rows.iter().find(|r| r.contains(second.as_str())).unwrap();
    assert!(theirs.contains(",nnnxn,"));
    // seconds precision, UTC
    let stamp = mine.rsplit(',').next().unwrap();
    assert_eq!(stamp.len(), "2024-01-01T00:00:00Z".len());
    assert!(stamp.ends_with('Z'));
}

#[tokio::test]
async fn images_are_served_from_the_directory() {
    let fx = Fixture::new();
    let app = fx.app();
    let resp = app
        .clone()
        .oneshot(Request::get("/images/img0").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    assert_eq!(resp.into_body().collect().await.unwrap().to_bytes(), PNG);

    assert_eq!(get(&app, "/images/img0.png").await.0, StatusCode::OK);
    assert_eq!(get(&app, "/images/missing").await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        get(&app, "/images/..%2Fplan.json").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(get(&app, "/images/.hidden").await.0, StatusCode::NOT_FOUND);
}

fn append_garbage(path: &Path) {
    let mut f = std::fs::OpenOptions::new().append(true).open(path).unwrap();
    f.write_all(b"{\"annotator_id\":\"ann0").unwrap();
}

#[tokio::test]
async fn ratings_survive_restart_and_torn_writes() {
    let fx = Fixture::new();
    let (ann, images) = fx.annotator(1);
    {
        let app = fx.app();
        post(&app, &rating(ann, &images[0], "virtue")).await;
        post(&app, &rating(ann, &images[1], "vice")).await;
    }
    append_garbage(&fx.cfg.store_path);

    let app = fx.app();
    let (_, p) = get(&app, &format!("/progress?annotator={ann}")).await;
    assert_eq!(as_json(&p)["rated"], 2);
    let (_, t) = get(&app, &format!("/tasks/next?annotator={ann}")).await;
    assert_eq!(as_json(&t)["image_id"], images[2].as_str());
    let (s, _) = post(&app, &rating(ann, &images[2], "neutral")).await;
    assert_eq!(s, StatusCode::CREATED);

    let app = fx.app();
    assert_eq!(
        get(&app, &format!("/tasks/next?annotator={ann}")).await.0,
        StatusCode::NO_CONTENT
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_annotators() {
    let fx = Fixture::new();
    let app = fx.app();
    let mut handles = Vec::new();
    for batch in &fx.plan.batches {
        for ann in &batch.annotator_ids {
            for img in &batch.image_ids {
                let app = app.clone();
                let body = rating(ann, img, "virtue");
                handles.push(tokio::spawn(async move { post(&app, &body).await.0 }));
            }
        }
    }
    let n = handles.len();
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::CREATED);
    }
    let (_, csv) = get(&app, "/export").await;
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), n + 1);
    let reopened = fx.app();
    let (_, csv) = get(&reopened, "/export").await;
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), n + 1);
}

#[test]
fn config_round_trips_through_key_value_text() {
    let mut cfg = ServiceConfig::default();
    cfg.apply_kv_text(
        "listen = 0.0.0.0:9000\nimage_dir = /srv/img\ninstructions_path = guide.md\n",
    )
    .unwrap();
    assert_eq!(cfg.listen.port(), 9000);
    assert_eq!(cfg.image_dir, Path::new("/srv/img"));
    let back = ServiceConfig::from_kv_text(&cfg.to_kv_string()).unwrap();
    assert_eq!(back, cfg);
    assert!(cfg.apply_kv_text("port = 1\n").is_err());
    assert!(cfg.apply_kv_text("listen = nowhere\n").is_err());
}
