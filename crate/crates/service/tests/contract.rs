use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use partlabel_core::audit::{read_events, replay_audit, Verdict};
use partlabel_core::dataset::PreparationConfig;
use partlabel_core::oracle::{Oracle, OracleConfig};
use partlabel_core::proposer::NodeSpec;
use partlabel_core::session::{working_tree, Annotator, ModifyTask, TaskItem, VerifyTask};
use partlabel_core::synthetic::{generate_dataset, Family, SyntheticConfig};
use partlabel_service::{router, AppState, ServiceConfig};

const POINTS: usize = 256;

fn app(dir: &tempfile::TempDir) -> Router {
    let mut config = ServiceConfig::new(dir.path(), dir.path().join("audit"));
    config.points_per_shape = POINTS;
    router(AppState::new(config).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("idempotency-key", k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn synthetic(shapes: usize, seed: u64) -> Value {
    json!({ "synthetic": { "family": "chair", "shapes": shapes, "seed": seed } })
}

/// The client-side copy of the oracle: same generator, same sampling.
fn local_oracle(shapes: usize, seed: u64, hierarchical: bool) -> Oracle {
    let cfg = SyntheticConfig {
        family: Family::Chair,
        shapes,
        seed,
        id_prefix: "chair".into(),
        ..Default::default()
    };
    let prep = PreparationConfig {
        points_per_shape: POINTS,
        seed,
        ..Default::default()
    };
    let data = generate_dataset(&cfg, &prep).unwrap();
    Oracle::new(working_tree(&data.tree, hierarchical), &data.shapes, OracleConfig::default()).unwrap()
}

async fn wait_phase(app: &Router, id: &str, done: impl Fn(&str) -> bool) -> Value {
    for _ in 0..2000 {
        let (status, s) = call(app, "GET", &format!("/sessions/{id}"), None, None).await;
        assert_eq!(status, StatusCode::OK);
        if done(s["phase"].as_str().unwrap()) {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("session {id} never left its phase");
}

async fn next(app: &Router, id: &str) -> Value {
    loop {
        let (status, task) = call(app, "GET", &format!("/sessions/{id}/tasks/next"), None, None).await;
        assert_eq!(status, StatusCode::OK, "{task}");
        if task["kind"] != "training_wait" {
            return task;
        }
        assert!((0.0..=1.0).contains(&task["progress"].as_f64().unwrap()));
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

fn verify_task(t: &Value) -> VerifyTask {
    VerifyTask {
        batch_id: t["batch_id"].as_str().unwrap().into(),
        node: serde_json::from_value::<NodeSpec>(t["node"].clone()).unwrap(),
        iteration: t["iteration"].as_u64().unwrap() as u32,
        items: t["items"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| serde_json::from_value::<TaskItem>(i.clone()).unwrap())
            .collect(),
    }
}

fn modify_task(t: &Value) -> ModifyTask {
    serde_json::from_value(t.clone()).unwrap()
}

fn audit_kinds(path: &str) -> Vec<String> {
    let events = read_events(std::fs::File::open(path).unwrap()).unwrap();
    events.iter().map(|e| e.body.kind().to_string()).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn simulated_session_completes_and_matches_replay() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let body = json!({
        "dataset": synthetic(50, 3),
        "mode": "simulated",
        "proposer": { "kind": "random", "seed": 1 },
        "config": { "pool_stop": 10 }
    });
    let (status, created) = call(&app, "POST", "/sessions", Some(body), None).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    let id = created["id"].as_str().unwrap().to_string();
    let done = wait_phase(&app, &id, |p| p == "complete" || p == "failed").await;
    assert_eq!(done["phase"], "complete", "{done}");

    let (status, report) = call(&app, "GET", &format!("/sessions/{id}/report"), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(report["evaluation"]["part_accuracy"], 1.0);
    assert_eq!(report["evaluation"]["miou"], 1.0);
    let replayed = replay_audit(done["audit_log"].as_str().unwrap().as_ref()).unwrap();
    assert_eq!(report["cost"], serde_json::to_value(replayed.ledger.report()).unwrap());

    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/verifications"), Some(json!({"batch_id": "x", "verdicts": []})), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn creation_validates_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let bad = json!({ "dataset": synthetic(5, 1), "config": { "batch_size": 10, "verify_stop_threshold": 11 } });
    let (status, err) = call(&app, "POST", "/sessions", Some(bad), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "verify_stop_threshold");

    let (status, err) = call(&app, "POST", "/sessions", Some(json!({ "dataset": "missing/dataset.json" })), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"].as_str().unwrap().contains("unknown dataset"), "{err}");
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "dataset": "../etc/passwd" })), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let body = json!({ "dataset": synthetic(5, 1) });
    let (s1, a) = call(&app, "POST", "/sessions", Some(body.clone()), Some("k1")).await;
    let (s2, b) = call(&app, "POST", "/sessions", Some(body.clone()), Some("k1")).await;
    let (_, c) = call(&app, "POST", "/sessions", Some(body), Some("k2")).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a["id"], b["id"]);
    assert_ne!(a["id"], c["id"]);
    let (_, list) = call(&app, "GET", "/sessions", None, None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);

    let (status, _) = call(&app, "GET", "/sessions/nope/tasks/next", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn shapes_carry_geometry_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let (_, created) = call(&app, "POST", "/sessions", Some(json!({ "dataset": synthetic(3, 2) })), None).await;
    let id = created["id"].as_str().unwrap();
    let (status, shape) = call(&app, "GET", &format!("/shapes/chair_0000?session={id}"), None, None).await;
    assert_eq!(status, StatusCode::OK, "{shape}");
    let parts = shape["parts"].as_array().unwrap();
    let points: usize = parts.iter().map(|p| p["points"].as_array().unwrap().len()).sum();
    assert_eq!(points, POINTS);
    assert!(parts.iter().all(|p| p["label"].is_null() && p["obb"]["extents"].is_array()));
    assert!(shape["palette"].as_object().unwrap().contains_key("back"));

    let (status, _) = call(&app, "GET", &format!("/shapes/nope?session={id}"), None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/shapes/chair_0000", None, None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn live_session_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let (shapes, seed) = (60, 4);
    let body = json!({
        "dataset": synthetic(shapes, seed),
        "proposer": { "kind": "random", "seed": 2 },
        "config": { "pool_stop": 10 }
    });
    let (_, created) = call(&app, "POST", "/sessions", Some(body), None).await;
    let id = created["id"].as_str().unwrap().to_string();
    let audit_log = created["audit_log"].as_str().unwrap().to_string();
    let mut oracle = local_oracle(shapes, seed, true);
    let url = |p: &str| format!("/sessions/{id}/{p}");

    let (mut verifications, mut modifications) = (0, 0);
    let (mut saw_stale, mut saw_propagation, mut saw_scope) = (false, false, false);
    loop {
        let task = next(&app, &id).await;
        match task["kind"].as_str().unwrap() {
            "done" => break,
            "verification_batch" => {
                let vt = verify_task(&task);
                assert!(!vt.items.is_empty() && vt.items.len() <= 10);
                let verdicts = oracle.verify(&vt).unwrap();
                let req = json!({ "batch_id": vt.batch_id, "verdicts": verdicts });

                let missing = json!({ "batch_id": vt.batch_id, "verdicts": &verdicts[1..] });
                let (status, _) = call(&app, "POST", &url("verifications"), Some(missing), None).await;
                assert_eq!(status, StatusCode::BAD_REQUEST);
                let mut stray = verdicts.clone();
                stray[0] = Verdict { shape: "chair_9999".into(), pass: true };
                let (status, _) = call(&app, "POST", &url("verifications"), Some(json!({ "batch_id": vt.batch_id, "verdicts": stray })), None).await;
                assert_eq!(status, StatusCode::BAD_REQUEST);

                let (status, ok) = call(&app, "POST", &url("verifications"), Some(req.clone()), None).await;
                assert_eq!(status, StatusCode::OK, "{ok}");
                assert_eq!(ok["replayed"], false);
                assert_eq!(ok["passed"].as_u64().unwrap() as usize, verdicts.iter().filter(|v| v.pass).count());
                verifications += 1;

                let (_, before) = call(&app, "GET", &url("report"), None, None).await;
                let (status, again) = call(&app, "POST", &url("verifications"), Some(req), None).await;
                assert_eq!((status, &again["replayed"]), (StatusCode::OK, &json!(true)));
                let (_, after) = call(&app, "GET", &url("report"), None, None).await;
                assert_eq!(before["cost"], after["cost"]);

                if !saw_stale {
                    let flipped: Vec<Verdict> = verdicts.iter().map(|v| Verdict { pass: !v.pass, ..v.clone() }).collect();
                    let (status, _) = call(&app, "POST", &url("verifications"), Some(json!({ "batch_id": vt.batch_id, "verdicts": flipped })), None).await;
                    assert_eq!(status, StatusCode::CONFLICT);
                    saw_stale = true;
                }
            }
            "modification" => {
                let mt = modify_task(&task);
                let truth = oracle.modify(&mt).unwrap();
                let node = &mt.node;
                if !saw_scope {
                    let foreign = if node.id == "chair" { "caster" } else { "back" };
                    let wrong = json!({ "shape": mt.shape, "labels": { mt.parts[0].to_string(): foreign } });
                    let (status, err) = call(&app, "POST", &url("modifications"), Some(wrong), None).await;
                    assert_eq!(status, StatusCode::BAD_REQUEST, "{err}");
                    saw_scope = true;
                }
                let (status, _) = call(&app, "POST", &url("modifications"), Some(json!({ "shape": "chair_9999" })), None).await;
                assert_eq!(status, StatusCode::BAD_REQUEST);

                // edit only the representative of a symmetric group
                let group = mt.symmetry.non_trivial().next().cloned();
                let mut labels = truth.clone();
                if let (Some(g), Some(proposed)) = (&group, &mt.proposed) {
                    let want = oracle.truth_at(node, &mt.shape, g.representative).unwrap();
                    let all_wrong = g.members.iter().all(|m| proposed[mt.parts.iter().position(|p| p == m).unwrap()] != want);
                    if all_wrong && node.kind == partlabel_core::NodeKind::And {
                        for m in &g.members {
                            labels.remove(m);
                        }
                        labels.insert(g.representative, want);
                    }
                }
                let key = format!("mod-{}-{}", mt.shape, mt.node.id);
                let (status, ok) = call(&app, "POST", &url("modifications"), Some(json!({ "shape": mt.shape, "labels": labels })), Some(&key)).await;
                assert_eq!(status, StatusCode::OK, "{ok}");
                modifications += 1;
                if let Some(g) = &group {
                    if !labels.contains_key(&g.members[1]) && labels.contains_key(&g.representative) {
                        let at = |p| ok["labels"][mt.parts.iter().position(|x| *x == p).unwrap()].clone();
                        assert!(g.members.iter().all(|&m| at(m) == at(g.representative)), "{ok}");
                        saw_propagation = true;
                    }
                }
                if truth.is_empty() && mt.proposed.is_some() {
                    assert_eq!(ok["edited"], 0);
                }
                let (status, again) = call(&app, "POST", &url("modifications"), Some(json!({ "shape": mt.shape, "labels": labels })), Some(&key)).await;
                assert_eq!((status, &again["replayed"]), (StatusCode::OK, &json!(true)));
            }
            other => panic!("unexpected task kind {other}"),
        }
    }
    assert!(saw_stale && saw_scope && saw_propagation, "stale {saw_stale} scope {saw_scope} propagation {saw_propagation}");

    let (_, report) = call(&app, "GET", &url("report"), None, None).await;
    assert_eq!(report["evaluation"]["part_accuracy"], 1.0);
    let kinds = audit_kinds(&audit_log);
    assert_eq!(kinds.iter().filter(|k| *k == "verify_batch").count(), verifications);
    assert_eq!(kinds.iter().filter(|k| *k == "modify_shape").count(), modifications);
    let replayed = replay_audit(audit_log.as_ref()).unwrap();
    assert_eq!(report["cost"], serde_json::to_value(replayed.ledger.report()).unwrap());
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_conflicting_verdicts_accept_exactly_one() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dir);
    let body = json!({
        "dataset": synthetic(60, 5),
        "proposer": { "kind": "random", "seed": 3 },
        "config": { "pool_stop": 10 }
    });
    let (_, created) = call(&app, "POST", "/sessions", Some(body), None).await;
    let id = created["id"].as_str().unwrap().to_string();
    let mut oracle = local_oracle(60, 5, true);
    let task = loop {
        let task = next(&app, &id).await;
        match task["kind"].as_str().unwrap() {
            "verification_batch" => break task,
            "modification" => {
                let mt = modify_task(&task);
                let labels = oracle.modify(&mt).unwrap();
                let (status, _) = call(&app, "POST", &format!("/sessions/{id}/modifications"), Some(json!({ "shape": mt.shape, "labels": labels })), None).await;
                assert_eq!(status, StatusCode::OK);
            }
            other => panic!("unexpected {other}"),
        }
    };
    let vt = verify_task(&task);
    let all = |pass: bool| {
        json!({ "batch_id": vt.batch_id, "verdicts": vt.items.iter().map(|i| Verdict { shape: i.shape.clone(), pass }).collect::<Vec<_>>() })
    };
    let uri = format!("/sessions/{id}/verifications");
    let (a, b) = tokio::join!(call(&app, "POST", &uri, Some(all(true)), None), call(&app, "POST", &uri, Some(all(false)), None));
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, status) = call(&app, "GET", &format!("/sessions/{id}"), None, None).await;
    let kinds = audit_kinds(status["audit_log"].as_str().unwrap());
    assert_eq!(kinds.iter().filter(|k| *k == "verify_batch").count(), 1);
}
