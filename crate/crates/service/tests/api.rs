use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use inrprop::feature_field::FeatureSource;
use inrprop::flow_field::Pair;
use inrprop::io;
use inrprop::maskops::{propagate_mask, BinaryMask, InteriorConfig, KdeConfig};
use inrprop::matching::MatchConfig;
use inrprop::synth::{make_volume, Pattern, SynthSpec, Warp};
use inrprop::Canvas;
use inrprop_service::{router, AppState, JobState, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Server {
    app: Router,
    _dir: TempDir,
}

fn server() -> Server {
    let dir = TempDir::new().unwrap();
    Server {
        app: router(AppState::new(ServiceConfig::new(dir.path()))),
        _dir: dir,
    }
}

impl Server {
    async fn call(&self, method: &str, uri: &str, body: impl Into<Vec<u8>>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).body(Body::from(body.into())).unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, body: &Value) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, serde_json::to_vec(body).unwrap()).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn ok(&self, method: &str, uri: &str, body: &Value) -> Value {
        let (s, v) = self.json(method, uri, body).await;
        assert_eq!(s, StatusCode::OK, "{method} {uri}: {v}");
        v
    }

    /// Polls until the job finishes, checking that its record only moves forward.
    async fn wait(&self, job: &str) -> Value {
        // polls may miss intermediate states, so compare ranks
        let rank = |s: JobState| match s {
            JobState::Queued => 0,
            JobState::Running => 1,
            JobState::Done | JobState::Failed => 2,
        };
        let mut last = (JobState::Queued, 0.0);
        loop {
            let (s, b) = self.call("GET", &format!("/jobs/{job}"), Vec::new()).await;
            assert_eq!(s, StatusCode::OK);
            let rec: inrprop_service::JobRecord = serde_json::from_slice(&b).unwrap();
            assert!(rank(rec.state) >= rank(last.0), "{:?} -> {:?}", last.0, rec.state);
            assert!(rec.progress >= last.1, "progress fell from {} to {}", last.1, rec.progress);
            last = (rec.state, rec.progress);
            if rec.state.is_finished() {
                return serde_json::to_value(rec).unwrap();
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }
}

const SIDE: usize = 32;

fn volume_bytes() -> Vec<u8> {
    let spec = SynthSpec {
        frames: 2,
        height: SIDE,
        width: SIDE,
        dim: 8,
        pattern: Pattern::SmoothRandom {
            min_wavelength: 8.0,
            components: 4,
        },
        warp: Warp::None,
        seed: 4,
    };
    io::encode_fvol(&make_volume(&spec).unwrap().0).unwrap()
}

fn fit_cfg() -> Value {
    json!({"epochs": 120, "hidden_dim": 48, "hr_size": SIDE, "cells_per_step": 256, "lr": 1e-3, "seed": 3})
}

fn flow_cfg() -> Value {
    json!({"epochs": 60, "hidden_dim": 24, "sample_grid": 16, "tv_grid": 8, "lr": 1e-3, "seed": 5})
}

/// Upload, fit and an identity-pair flow on frame 0. Returns the flow id.
async fn fitted(srv: &Server) -> String {
    let (s, b) = srv.call("POST", "/videos", volume_bytes()).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["video_id"], "v1");
    let job = srv.ok("POST", "/videos/v1/fit", &fit_cfg()).await["job_id"].as_str().unwrap().to_owned();
    let rec = srv.wait(&job).await;
    assert_eq!(rec["state"], "done", "{rec}");
    assert_eq!(rec["progress"], 1.0);
    let flow = srv
        .ok("POST", "/flows", &json!({"src": "v1:0", "tgt": "v1:0", "cfg": flow_cfg()}))
        .await["job_id"]
        .as_str()
        .unwrap()
        .to_owned();
    let rec = srv.wait(&flow).await;
    assert_eq!(rec["state"], "done", "{rec}");
    flow
}

fn pgm(mask: &BinaryMask) -> Vec<u8> {
    io::encode_mask_pgm(mask)
}

fn annotation(extra: Value) -> Value {
    let mut a = json!({"video_id": "v1", "frame": 0, "canvas": {"width": SIDE, "height": SIDE}});
    a.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    a
}

#[tokio::test]
async fn unknown_resources_are_404() {
    let srv = server();
    for uri in ["/jobs/j1", "/jobs/nonsense", "/videos/v1", "/masks/m1", "/probabilities/p3"] {
        assert_eq!(srv.call("GET", uri, Vec::new()).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    assert_eq!(srv.json("POST", "/videos/v9/fit", &json!({})).await.0, StatusCode::NOT_FOUND);
    let (s, v) = srv.json("POST", "/rethreshold", &json!({"probability": "p1", "tau": 0.5})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("p1"));
    let body = json!({"annotation": annotation(json!({"points": [{"x": 1.0, "y": 1.0}]})), "flow": "j4"});
    assert_eq!(srv.json("POST", "/propagate/points", &body).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_are_422() {
    let srv = server();
    assert_eq!(srv.call("POST", "/videos", b"FVOLjunk".to_vec()).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(srv.call("POST", "/masks", b"P5\n4 4\n255\n".to_vec()).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(srv.call("POST", "/videos", volume_bytes()).await.0, StatusCode::OK);
    let (s, v) = srv.json("POST", "/videos/v1/fit", &json!({"hr_size": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(srv.call("POST", "/videos/v1/fit", b"{not json".to_vec()).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = srv.json("POST", "/flows", &json!({"src": "v1:0", "tgt": "v1:1", "bogus": 1})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("bogus"));
    assert_eq!(
        srv.json("POST", "/flows", &json!({"src": "v1", "tgt": "v1:1"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn flows_need_finished_fits() {
    let srv = server();
    srv.call("POST", "/videos", volume_bytes()).await;
    let (s, v) = srv.json("POST", "/flows", &json!({"src": "v1:0", "tgt": "v1:1"})).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert_eq!(srv.json("POST", "/flows", &json!({"src": "v2:0", "tgt": "v1:1"})).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn divergent_fit_fails_with_stage() {
    let srv = server();
    srv.call("POST", "/videos", volume_bytes()).await;
    let cfg = json!({"epochs": 30, "hidden_dim": 8, "n_hidden_layers": 1, "hr_size": SIDE, "lr": 1e300,
                     "activation": {"kind": "relu"}});
    let job = srv.ok("POST", "/videos/v1/fit", &cfg).await["job_id"].as_str().unwrap().to_owned();
    let rec = srv.wait(&job).await;
    assert_eq!(rec["state"], "failed");
    assert!(rec["error"].as_str().unwrap().starts_with("field-fit stage"), "{rec}");
    // the video stays unfitted
    assert_eq!(srv.json("POST", "/flows", &json!({"src": "v1:0", "tgt": "v1:0"})).await.0, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn point_and_mask_propagation_loop() {
    let srv = server();
    let flow = fitted(&srv).await;
    let canvas = Canvas::square(SIDE);

    // points
    let pts = json!({"points": [{"x": 5.0, "y": 7.0, "label": "a"}, {"x": 20.0, "y": 11.0}, {"x": 16.0, "y": 25.0}]});
    let doc = srv.ok("POST", "/propagate/points", &json!({"annotation": annotation(pts.clone()), "flow": flow})).await;
    assert_eq!(doc["mode"], "points");
    assert_eq!(doc["seed"], 5);
    assert_eq!(doc["configs"]["flow"]["epochs"], 60);
    assert_eq!(doc["results"].as_array().unwrap().len(), 3);
    let parsed: io::PropagationDoc = serde_json::from_value(doc).unwrap();
    parsed.validate().unwrap();

    let mut wrong = annotation(pts);
    wrong["frame"] = json!(1);
    assert_eq!(
        srv.json("POST", "/propagate/points", &json!({"annotation": wrong, "flow": flow})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let fit_job = json!({"annotation": annotation(json!({"points": [{"x": 1.0, "y": 1.0}]})), "flow": "j1"});
    assert_eq!(srv.json("POST", "/propagate/points", &fit_job).await.0, StatusCode::NOT_FOUND);

    // mask
    let disc = BinaryMask::disc(canvas, [16.0, 16.0], 9.0);
    let up = serde_json::from_slice::<Value>(&srv.call("POST", "/masks", pgm(&disc)).await.1).unwrap();
    assert_eq!(up["mask_ref"], "m1");
    assert_eq!(up["foreground_count"], disc.count());
    let req = json!({"annotation": annotation(json!({"mask_ref": "m1"})), "flow": flow});
    let doc = srv.ok("POST", "/propagate/mask", &req).await;
    let out = &doc["mask"];
    assert_eq!(out["probability_ref"], "p1");
    let mask_ref = out["mask_ref"].as_str().unwrap().to_owned();

    // the service result equals the engine run on the stored artifacts
    let field_path = srv.ok("GET", "/jobs/j1", &Value::Null).await["result_ref"].as_str().unwrap().to_owned();
    let disp_path = srv.ok("GET", &format!("/jobs/{flow}"), &Value::Null).await["result_ref"].as_str().unwrap().to_owned();
    let field = io::read_feature_field::<f64>(&field_path).unwrap();
    let disp = io::read_displacement::<f64>(&disp_path).unwrap();
    assert_eq!(FeatureSource::<f64>::canvas(&field), canvas);
    let pair = Pair::new(&field, 0, &field, 0);
    let local = propagate_mask(
        &disc,
        &pair,
        &disp,
        &MatchConfig::default(),
        &InteriorConfig::default(),
        &KdeConfig::default(),
    )
    .unwrap();
    let (s, served) = srv.call("GET", &format!("/masks/{mask_ref}"), Vec::new()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(io::decode_mask_pgm(&served).unwrap(), local.mask);
    let dice = srv.ok("POST", "/dice", &json!({"a": mask_ref, "b": "m1"})).await["dice"].as_f64().unwrap();
    assert_eq!(dice, inrprop::metrics::dice(&local.mask, &disc).unwrap());
    assert!(dice > 0.5, "dice {dice}");

    // same request with another tau reuses the probability field
    let mut again = req.clone();
    again["kde"] = json!({"tau": 0.6});
    let doc2 = srv.ok("POST", "/propagate/mask", &again).await;
    assert_eq!(doc2["mask"]["probability_ref"], "p1");
    assert!(doc2["mask"]["foreground_count"].as_u64() <= out["foreground_count"].as_u64());
    assert_eq!(doc2["results"], doc["results"]);

    // raising tau only removes pixels
    let mut prev: Option<BinaryMask> = None;
    for tau in [0.05, 0.25, 0.5, 0.75, 0.9, 1.0] {
        let r = srv.ok("POST", "/rethreshold", &json!({"probability": "p1", "tau": tau})).await;
        let m = io::decode_mask_pgm(&srv.call("GET", &format!("/masks/{}", r["mask_ref"].as_str().unwrap()), Vec::new()).await.1)
            .unwrap();
        if let Some(p) = &prev {
            assert!(m.is_subset_of(p), "tau {tau}");
        }
        prev = Some(m);
    }
    for tau in [0.0, -0.5, 1.5] {
        let r = srv.json("POST", "/rethreshold", &json!({"probability": "p1", "tau": tau})).await;
        assert_eq!(r.0, StatusCode::UNPROCESSABLE_ENTITY, "tau {tau}");
    }
    let (s, prob) = srv.call("GET", "/probabilities/p1", Vec::new()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(io::decode_probability_pgm(&prob).unwrap().canvas(), canvas);

    // a 3x3 square has one interior pixel, so tau = 1 keeps exactly the peak
    let square = BinaryMask::from_fn(canvas, |x, y| (9..12).contains(&x) && (14..17).contains(&y));
    let m = serde_json::from_slice::<Value>(&srv.call("POST", "/masks", pgm(&square)).await.1).unwrap();
    let req = json!({"annotation": annotation(json!({"mask_ref": m["mask_ref"]})), "flow": flow});
    let doc = srv.ok("POST", "/propagate/mask", &req).await;
    assert_eq!(doc["mask"]["interior_count"], 1);
    let peak = doc["results"][0]["predicted"].clone();
    let prob_ref = doc["mask"]["probability_ref"].clone();
    assert_eq!(prob_ref, "p2");
    let r = srv.ok("POST", "/rethreshold", &json!({"probability": prob_ref, "tau": 1.0})).await;
    assert_eq!(r["foreground_count"], 1);
    let only = io::decode_mask_pgm(&srv.call("GET", &format!("/masks/{}", r["mask_ref"].as_str().unwrap()), Vec::new()).await.1)
        .unwrap();
    let [x, y] = [peak[0].as_f64().unwrap() as usize, peak[1].as_f64().unwrap() as usize];
    assert!(only.get(x, y));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replay_gives_identical_responses() {
    let mut docs = Vec::new();
    for _ in 0..2 {
        let srv = server();
        let flow = fitted(&srv).await;
        let pts = annotation(json!({"points": [{"x": 3.0, "y": 4.0}, {"x": 30.0, "y": 2.5}]}));
        let (s, body) = srv
            .call("POST", "/propagate/points", serde_json::to_vec(&json!({"annotation": pts, "flow": flow})).unwrap())
            .await;
        assert_eq!(s, StatusCode::OK);
        docs.push(body);
    }
    assert_eq!(docs[0], docs[1]);
}
