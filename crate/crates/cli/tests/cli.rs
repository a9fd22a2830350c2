use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slotdisc"));
    c.env("SLOTDISC_LOG", "warn");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const FAST: &[&str] = &["--initial-epochs", "2", "--epochs-per-iteration", "1"];

fn corpus(dir: &Path, spans: usize) -> PathBuf {
    ok(&["generate", "--out", "c.jsonl", "--spans", &spans.to_string()], dir);
    dir.join("c.jsonl")
}

#[test]
fn simulate_rerun_from_manifest_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    corpus(t.path(), 120);
    let mut args = vec!["simulate", "--data", "c.jsonl", "--out-dir", "a", "--strategy", "bi_criteria", "--beta", "0.9", "--alpha", "0.05", "--seed", "0"];
    args.extend(FAST);
    ok(&args, t.path());
    let m = json(t.path().join("a/manifest.json"));
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["seeds"], serde_json::json!([0]));
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["cells"].as_array().unwrap().len(), 1);

    ok(&["simulate", "--manifest", "a/manifest.json", "--out-dir", "b"], t.path());
    let curve = |d: &str| std::fs::read(t.path().join(d).join("bi_criteria-seed0/curve.csv")).unwrap();
    assert_eq!(curve("a"), curve("b"));
    assert!(String::from_utf8(curve("a")).unwrap().starts_with("iteration,labeled_fraction,span_f1,known_slots,new_slots_discovered\n"));

    std::fs::write(t.path().join("c.jsonl"), "").unwrap();
    let out = run(&["simulate", "--manifest", "a/manifest.json", "--out-dir", "c"], t.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn strategy_all_expands_the_matrix_and_reports() {
    let t = tempfile::tempdir().unwrap();
    corpus(t.path(), 60);
    let mut args = vec!["simulate", "--data", "c.jsonl", "--out-dir", "m", "--strategy", "all", "--seeds", "0..4", "--patience", "none"];
    args.extend(FAST);
    ok(&args, t.path());
    let m = json(t.path().join("m/manifest.json"));
    let cells = m["config"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 35);
    for c in cells {
        assert!(t.path().join("m").join(c["dir"].as_str().unwrap()).join("curve.csv").is_file());
    }
    let table = ok(&["report", "--manifest", "m/manifest.json"], t.path());
    for s in ["random", "entropy", "margin", "bald", "diversity", "bi_criteria", "hybrid"] {
        assert!(table.lines().any(|l| l.starts_with(s) && l.trim_end().ends_with(" 5")), "{table}");
    }
    let agg = std::fs::read_to_string(t.path().join("m/aggregate.csv")).unwrap();
    assert!(agg.lines().count() > 7);
    assert!(t.path().join("m/report.manifest.json").is_file());
    let diffs = json(t.path().join("m/mean_differences.json"));
    assert!(diffs["bi_criteria"]["random"].is_number());
}

#[test]
fn evaluate_and_score_dump() {
    let t = tempfile::tempdir().unwrap();
    corpus(t.path(), 100);
    let mut args = vec!["simulate", "--data", "c.jsonl", "--out-dir", "s", "--budget", "0.3"];
    args.extend(FAST);
    ok(&args, t.path());
    let table = ok(&["evaluate", "--model", "s/bi_criteria-seed0/model.ckpt", "--data", "c.jsonl"], t.path());
    assert!(table.contains("weighted"));
    let v: Value = serde_json::from_str(&ok(
        &["evaluate", "--model", "s/bi_criteria-seed0/model.ckpt", "--data", "c.jsonl", "--json", "--out", "r.json"],
        t.path(),
    ))
    .unwrap();
    let f1 = v["span_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(json(t.path().join("r.json")), v);
    assert!(t.path().join("r.json.manifest.json").is_file());

    std::fs::write(t.path().join("empty.jsonl"), "").unwrap();
    let out = run(&["evaluate", "--model", "s/bi_criteria-seed0/model.ckpt", "--data", "empty.jsonl"], t.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["evaluate", "--model", "s/bi_criteria-seed0/state.ckpt", "--data", "c.jsonl"], t.path());
    assert_eq!(out.status.code(), Some(1));

    ok(&["score-dump", "--state", "s/bi_criteria-seed0/state.ckpt", "--data", "c.jsonl", "--out", "scores.csv"], t.path());
    let csv = std::fs::read_to_string(t.path().join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("span_id,strategy,uncertainty,diversity,combined"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("bi_criteria") && r.split(',').count() == 5));
}

#[test]
fn extract_reports_frequency_filtering() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("d.jsonl"),
        [
            r#"{"utterance_id":"u1","dialogue_id":"d","turn":0,"tokens":["a","room","in","Cambridge","for","3","people"],"spans":[{"span_id":"g1","start":3,"len":1,"gold_label":"area"}]}"#,
            r#"{"utterance_id":"u2","dialogue_id":"d","turn":1,"tokens":["stay","in","Cambridge","for","3","nights"],"spans":[]}"#,
            r#"{"utterance_id":"u3","dialogue_id":"d","turn":2,"tokens":["Cambridge","at","5","pm"],"spans":[]}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let report: Value = serde_json::from_str(&ok(&["extract", "--in", "d.jsonl", "--out", "e.jsonl", "--min-freq", "3"], t.path())).unwrap();
    assert!(report["filter"]["removed_frequency"].as_u64().unwrap() > 0);
    assert_eq!(report["gold_matched"], 1);
    assert!(t.path().join("e.jsonl.report.json").is_file());
    assert!(t.path().join("e.jsonl.manifest.json").is_file());
    let spans: Vec<Value> = std::fs::read_to_string(t.path().join("e.jsonl"))
        .unwrap()
        .lines()
        .flat_map(|l| serde_json::from_str::<Value>(l).unwrap()["spans"].as_array().unwrap().clone())
        .collect();
    assert!(!spans.is_empty());
    assert!(spans.iter().all(|s| s["weak_label"].as_str().is_some_and(|w| !w.is_empty())));

    let out = run(&["extract", "--in", "missing.jsonl", "--out", "x.jsonl"], t.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["extract", "--out", "x.jsonl"], t.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn convert_bio() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("b.txt"), "cheap B-pricerange\nhotel O\nin O\nthe O\nnorth B-area\n\nfour B-stars\nstars O\n").unwrap();
    let s = ok(&["convert", "--in", "b.txt", "--out", "c.jsonl"], t.path());
    assert!(s.contains("2 utterances, 3 spans"), "{s}");
    let out = run(&["evaluate", "--model", "none.ckpt", "--data", "c.jsonl"], t.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["simulate", "--out-dir", "x"], t.path()).status.code(), Some(2));
    assert_eq!(run(&["bogus"], t.path()).status.code(), Some(2));
    corpus(t.path(), 40);
    let out = run(&["simulate", "--data", "c.jsonl", "--out-dir", "x", "--strategy", "nope"], t.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["simulate", "--data", "c.jsonl", "--out-dir", "x", "--beta", "2"], t.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["--help"], t.path()).status.code(), Some(0));
}

fn spawn_serve(dir: &Path, extra: &[&str]) -> (std::process::Child, String) {
    let mut child = bin()
        .args(["serve", "--data", "c.jsonl", "--state-dir", "state", "--port", "0", "--initial-epochs", "2", "--batch-fraction", "0.1"])
        .args(extra)
        .current_dir(dir)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("{line}")).to_owned();
    (child, addr)
}

fn http_get(addr: &str, path: &str) -> String {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

fn terminate(mut child: std::process::Child) {
    let pid = child.id().to_string();
    assert!(Command::new("kill").args(["-TERM", &pid]).status().unwrap().success());
    let status = child.wait().unwrap();
    assert!(status.success(), "{status:?}");
}

#[test]
fn serve_start_shutdown_resume() {
    let t = tempfile::tempdir().unwrap();
    corpus(t.path(), 60);
    let (child, addr) = spawn_serve(t.path(), &[]);
    let resp = http_get(&addr, "/api/progress");
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"phase\":\"annotating\""));
    let batch = http_get(&addr, "/api/batch?annotator=a&max=2");
    assert!(batch.contains("\"status\":\"assigned\""));
    terminate(child);
    assert!(t.path().join("state/state.ckpt").is_file());
    assert!(t.path().join("state/board.json").is_file());
    assert!(t.path().join("state/manifest.json").is_file());

    let (child, addr) = spawn_serve(t.path(), &["--resume"]);
    let batch = http_get(&addr, "/api/batch?annotator=b&max=100");
    let body: Value = serde_json::from_str(batch.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["iteration"], 1);
    assert_eq!(body["tasks"].as_array().unwrap().len(), 5);
    terminate(child);
}
