use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn partlabel(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partlabel"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = partlabel(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn datasets(dir: &Path) {
    ok(&["generate", "--family", "table", "--shapes", "20", "--seed", "1", "--out", "train"], dir);
    ok(&["generate", "--family", "table", "--shapes", "60", "--seed", "2", "--out", "test"], dir);
}

#[test]
fn pretrain_then_simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datasets(d);
    let out = ok(&["pretrain", "--dataset", "train/dataset.json", "--out", "model.bin", "--epochs", "40", "--points", "256"], d);
    assert!(out.contains("saved model.bin"), "{out}");
    std::fs::write(d.join("config.json"), r#"{ "pool_stop": 10, "batch_size": 8, "verify_stop_threshold": 3 }"#).unwrap();
    let sim = |out: &str, audit: &str| {
        ok(
            &[
                "simulate", "--dataset", "test/dataset.json", "--model", "model.bin", "--config", "config.json", "--seed", "7",
                "--points", "256", "--audit", audit, "--out", out,
            ],
            d,
        )
    };
    let table = sim("a.json", "a.jsonl");
    sim("b.json", "b.jsonl");
    assert!(table.contains("accuracy 1.0000  mIoU 1.0000"), "{table}");
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());

    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["report"]["config"]["batch_size"], 8);
    assert_eq!(report["report"]["config"]["seed"], 7);
    assert_eq!(report["report"]["evaluation"]["miou"], 1.0);
    let root = &report["report"]["nodes"][0];
    assert!(!root["verified_per_iteration"].as_array().unwrap().is_empty());

    // the replayed log agrees with the live report
    ok(&["report", "--session", "a.jsonl", "--out", "replayed.json", "--csv", "series.csv"], d);
    let replayed: Value = serde_json::from_slice(&std::fs::read(d.join("replayed.json")).unwrap()).unwrap();
    assert_eq!(replayed["cost"], report["report"]["cost"]);
    let series = std::fs::read_to_string(d.join("series.csv")).unwrap();
    assert!(series.starts_with("node,iteration,verified,modified\n"), "{series}");
}

#[test]
fn report_names_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datasets(d);
    ok(&["simulate", "--dataset", "test/dataset.json", "--points", "256", "--audit", "log.jsonl"], d);
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let lines = log.lines().count();
    std::fs::write(d.join("torn.jsonl"), &log[..log.len() - 10]).unwrap();
    let out = partlabel(&["report", "--session", "torn.jsonl"], d);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {lines}")), "{err}");
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    datasets(d);
    let table = ok(
        &[
            "ablate", "--train", "train/dataset.json", "--dataset", "test/dataset.json", "--epochs", "40", "--points", "256",
            "--seeds", "3", "--out", "table.csv", "--series", "fig.csv",
        ],
        d,
    );
    for row in ["modify-everything", "proposer+modify-all", "flat-active", "no-sym", "full"] {
        assert!(table.contains(row), "{table}");
    }
    let mut reader = csv::Reader::from_path(d.join("table.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    let hours = |name: &str| rows.iter().find(|r| &r[1] == name).unwrap()[5].parse::<f64>().unwrap();
    assert!(rows.iter().all(|r| &r[6] == "1.0000"));
    assert!(hours("full") < hours("modify-everything"));
    assert!(std::fs::read_to_string(d.join("fig.csv")).unwrap().starts_with("seed,node,hierarchical,flat"));
}

#[test]
fn errors_are_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let out = partlabel(&["simulate", "--dataset", "missing.json"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading dataset missing.json"));
    let out = partlabel(&["ablate", "--grid", "full,sideways"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation row `sideways`"));
    let out = partlabel(&["ablate", "--train", "x.json"], dir.path());
    assert!(!out.status.success());
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_partlabel"))
        .args(["serve", "--port", &port.to_string(), "--audit-dir", "audit"])
        .env("PARTLABEL_DATASET_ROOT", dir.path())
        .current_dir(dir.path())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let response = loop {
        if let Some(r) = http_get(port, "/sessions") {
            break r;
        }
        assert!(start.elapsed() < Duration::from_secs(20), "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    let missing = http_get(port, "/sessions/none/report").unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.ends_with("[]"), "{response}");
    assert!(missing.starts_with("HTTP/1.1 404"), "{missing}");
    assert!(dir.path().join("audit").is_dir());
}
