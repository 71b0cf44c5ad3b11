//! In-process HTTP harness shared by the server tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use jndloc_core::config::StudyConfig;
use jndloc_core::imaging::{CodecId, DistortionLevel};
use jndloc_core::protocol::Response;
use jndloc_core::simobserver::{GroundTruthScenario, ScenarioParams};
use jndloc_core::study::{self, Event, StudyDefinition, StudyState};
use jndloc_server::{AppState, ServerConfig, STUDY_FILE};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const ADMIN: &str = "admin-secret";

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap()
}

pub struct Fixture {
    pub dir: TempDir,
    pub cfg: ServerConfig,
    pub def: StudyDefinition,
}

impl Fixture {
    pub fn new(study_images: usize, target: u32, overshoot: u32, snapshot_every: u64) -> Self {
        let p = ScenarioParams {
            pool_size: study_images + 25,
            study_images,
            observers: 1,
            spammers: 0,
            lapsing_spammers: 0,
            width: 96,
            height: 96,
            region_sigma: 8.0,
            region_min_distance: 30.0,
            region_margin: 10.0,
            ..Default::default()
        };
        let sc = GroundTruthScenario::synthetic(&p).unwrap();
        let config = StudyConfig {
            codecs: vec![CodecId::Jpeg],
            target_responses: target,
            assignment_overshoot: overshoot,
            sigma_blur: 8.0,
            mean_shift_bandwidth: 8.0,
            sigma_region: 8.0,
            ..Default::default()
        };
        let def = sc.study_definition(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        std::fs::create_dir_all(&data_dir).unwrap();
        def.save(&data_dir.join(STUDY_FILE)).unwrap();
        let cfg = ServerConfig {
            data_dir,
            ladder_root: dir.path().join("ladders"),
            admin_token: ADMIN.into(),
            snapshot_every,
        };
        Self { dir, cfg, def }
    }

    pub fn open(&self) -> AppState {
        AppState::open_with_clock(&self.cfg, Arc::new(t0)).unwrap()
    }

    pub fn events_path(&self) -> std::path::PathBuf {
        self.cfg.data_dir.join(jndloc_server::EVENTS_FILE)
    }

    pub fn events(&self) -> Vec<Event> {
        study::read_events(&self.events_path()).unwrap()
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

pub async fn open_session(app: &Router, worker: &str) -> String {
    let r = call(
        app,
        Method::POST,
        "/v1/session",
        None,
        Some(json!({"worker_id": worker, "ppi": 96.0, "confirmed_distance": true, "viewport": [1920, 1080]})),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    r.json()["token"].as_str().unwrap().to_string()
}

/// Answer for `image`: inside the gold range with clicks on the centers
/// when `correct`, otherwise outside with corner clicks.
pub fn answer(def: &StudyDefinition, worker: &str, hit_id: &str, image: &str, correct: bool) -> Response {
    let (level, clicks) = match def.catalog.gold_specs.get(image) {
        Some(spec) => {
            let [lo, hi] = spec.pjnd_range;
            if correct {
                ((lo + hi) / 2, spec.centers)
            } else {
                (if lo > 1 { lo - 1 } else { hi + 1 }, [[0, 0], [0, 1], [1, 0]])
            }
        }
        None => (40, [[10, 10], [50, 50], [80, 20]]),
    };
    Response {
        worker_id: worker.into(),
        hit_id: hit_id.into(),
        image_ref: image.into(),
        level: DistortionLevel::new(level as i64).unwrap(),
        clicks,
        started_at: t0(),
        submitted_at: t0() + Duration::seconds(20),
        client_ppi: Some(96.0),
    }
}

/// Drives one worker through training and the quiz over HTTP.
pub async fn qualify(app: &Router, def: &StudyDefinition, worker: &str, token: &str, quiz_correct: usize) -> Value {
    let mut quiz_seen = 0;
    loop {
        let item = call(app, Method::GET, "/v1/qualification/next", Some(token), None).await;
        assert_eq!(item.status, StatusCode::OK, "{}", String::from_utf8_lossy(&item.bytes));
        let item = item.json();
        let image = item["image_ref"].as_str().unwrap().to_string();
        let training = item["phase"] == "training";
        let correct = training || quiz_seen < quiz_correct;
        if !training {
            quiz_seen += 1;
        }
        let resp = answer(def, worker, "qualification", &image, correct);
        if training {
            let gate = call(
                app,
                Method::POST,
                "/v1/qualification/level",
                Some(token),
                Some(json!({"level": resp.level.get()})),
            )
            .await;
            assert_eq!(gate.json()["accepted"], true);
        }
        let r = call(
            app,
            Method::POST,
            "/v1/qualification/response",
            Some(token),
            Some(serde_json::to_value(&resp).unwrap()),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
        let v = r.json();
        if v["status"] == "quiz_graded" {
            return v;
        }
    }
}

/// Fetches the next HIT and answers `answer_items` of its items. Returns
/// the HIT id, or the status code when no HIT was served.
pub async fn work_hit(
    app: &Router,
    def: &StudyDefinition,
    worker: &str,
    token: &str,
    answer_items: usize,
) -> Result<String, StatusCode> {
    let r = call(app, Method::GET, "/v1/hit/next", Some(token), None).await;
    if r.status != StatusCode::OK {
        return Err(r.status);
    }
    let hit = r.json();
    let hit_id = hit["hit_id"].as_str().unwrap().to_string();
    let answered: BTreeSet<String> = hit["answered"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    let pending: Vec<String> = hit["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["image_ref"].as_str().unwrap().to_string())
        .filter(|id| !answered.contains(id))
        .collect();
    for image in pending.iter().take(answer_items) {
        let resp = answer(def, worker, &hit_id, image, true);
        let r = call(
            app,
            Method::POST,
            &format!("/v1/hit/{hit_id}/response"),
            Some(token),
            Some(serde_json::to_value(&resp).unwrap()),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    }
    Ok(hit_id)
}

/// Assignment statistics derived from a log.
pub struct AssignmentAudit {
    /// Largest number of assignments any study image received.
    pub max_image_assignments: u32,
    /// Worker and image pairs served more than once.
    pub repeats: Vec<(String, String)>,
    pub assignments: usize,
}

pub fn audit_assignments(def: &StudyDefinition, events: &[Event]) -> AssignmentAudit {
    let mut per_image: BTreeMap<&str, u32> = BTreeMap::new();
    let mut seen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut repeats = Vec::new();
    let mut assignments = 0;
    for e in events {
        if let Event::HitAssigned { worker_id, hit_id, .. } = e {
            assignments += 1;
            let hit = def.catalog.hits.iter().find(|h| &h.hit_id == hit_id).unwrap();
            for item in &hit.items {
                if !item.gold {
                    *per_image.entry(item.image_ref.as_str()).or_default() += 1;
                }
                if !seen.entry(worker_id.as_str()).or_default().insert(item.image_ref.as_str()) {
                    repeats.push((worker_id.clone(), item.image_ref.clone()));
                }
            }
        }
    }
    AssignmentAudit {
        max_image_assignments: per_image.values().copied().max().unwrap_or(0),
        repeats,
        assignments,
    }
}

/// Runs `clients` concurrent workers against one server. Every fifth
/// client abandons its second HIT half way to keep assignments in flight.
pub async fn stress(fx: &Fixture, clients: usize, hits_per_client: usize) -> AssignmentAudit {
    let app = jndloc_server::router(fx.open());
    let def = Arc::new(fx.def.clone());
    let tasks: Vec<_> = (0..clients)
        .map(|i| {
            let app = app.clone();
            let def = def.clone();
            tokio::spawn(async move {
                let worker = format!("w{i:03}");
                let token = open_session(&app, &worker).await;
                let graded = qualify(&app, &def, &worker, &token, 10).await;
                assert_eq!(graded["result"]["passed"], true);
                for h in 0..hits_per_client {
                    let items = if i % 5 == 0 && h == 1 { 5 } else { 11 };
                    match work_hit(&app, &def, &worker, &token, items).await {
                        Ok(_) if items < 11 => break,
                        Ok(_) => {}
                        Err(s) => {
                            assert!(s == StatusCode::NOT_FOUND || s == StatusCode::FORBIDDEN, "{s}");
                            break;
                        }
                    }
                }
            })
        })
        .collect();
    for t in tasks {
        t.await.unwrap();
    }
    audit_assignments(&fx.def, &fx.events())
}

/// Replays a recorded workload after truncating its log at `cut` bytes and
/// returns (restored, expected) states. Snapshots ahead of the cut are
/// discarded as a crash would.
pub fn restore_after_cut(fx: &Fixture, full_log: &[u8], cut: usize, snapshot: Option<&[u8]>) -> (StudyState, StudyState) {
    let path = fx.events_path();
    std::fs::write(&path, &full_log[..cut]).unwrap();
    let snap_path = fx.cfg.data_dir.join(jndloc_server::SNAPSHOT_FILE);
    match snapshot {
        Some(bytes) => std::fs::write(&snap_path, bytes).unwrap(),
        None => {
            let _ = std::fs::remove_file(&snap_path);
        }
    }
    let complete = full_log[..cut].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let expected_events: Vec<Event> = full_log[..complete]
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).unwrap())
        .collect();
    let state = fx.open();
    let restored = state.with_reader(|w| w.engine().state().clone());
    (restored, StudyState::replay(&expected_events))
}

pub fn copy_file(from: &Path) -> Option<Vec<u8>> {
    std::fs::read(from).ok()
}
