use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/audit")
}

fn config_path() -> PathBuf {
    fixtures().join("config.json")
}

fn ragaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragaudit")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a copy of the fixture config with `edit` applied, next to copies
/// of the fixture inputs.
fn edited_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    for name in ["corpus.json", "queries.txt"] {
        std::fs::copy(fixtures().join(name), dir.join(name)).unwrap();
    }
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(config_path()).unwrap()).unwrap();
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn audit_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let run = ragaudit(&["audit", "--config", path_str(&config_path()), "--out", path_str(out)]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(a, b);
    let golden = std::fs::read_to_string(fixtures().join("golden_report.json")).unwrap();
    assert_eq!(String::from_utf8(a).unwrap(), golden);
}

#[test]
fn seed_flag_overrides_config() {
    let run = ragaudit(&["audit", "--config", path_str(&config_path()), "--seed", "5", "--parallelism", "2"]);
    assert_eq!(code(&run), 0);
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["provenance"]["seed"], 5);
}

#[test]
fn audit_renders_html_and_ansi() {
    let html = ragaudit(&["audit", "--config", path_str(&config_path()), "--format", "html"]);
    assert_eq!(code(&html), 0);
    assert!(String::from_utf8(html.stdout).unwrap().starts_with("<!DOCTYPE html>"));
    let ansi = ragaudit(&["audit", "--config", path_str(&config_path()), "--format", "ansi"]);
    assert!(String::from_utf8(ansi.stdout).unwrap().contains("\x1b[48;5;"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_config(dir.path(), |c| c["k"] = Value::from(0));
    let run = ragaudit(&["audit", "--config", path_str(&path)]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("k must be at least 1"));

    let missing = ragaudit(&["audit", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn recorded_query_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("ranking.json"),
        r#"[{"query": "ok", "ranked_doc_ids": ["d01", "d02"], "scores": [2.0, 1.0]},
            {"query": "broken", "ranked_doc_ids": ["nope"], "scores": [1.0]}]"#,
    )
    .unwrap();
    let path = edited_config(dir.path(), |c| {
        c["queries"] = serde_json::json!({"inline": ["ok", "broken"]});
        c["documents"] = serde_json::json!({"ranking": {"ranking_file": "ranking.json", "corpus_file": "corpus.json"}});
    });
    let out = dir.path().join("report.json");
    let run = ragaudit(&["audit", "--config", path_str(&path), "--out", path_str(&out)]);
    assert_eq!(code(&run), 2);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["queries"][1]["error"]["code"], "precondition");
}

#[test]
fn unreachable_backend_exits_three() {
    // Bind and drop a listener to find a port with nothing behind it.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let path = edited_config(dir.path(), |c| {
        c["generator"]["client"] = serde_json::json!({"http": {
            "base_url": format!("http://127.0.0.1:{port}"),
            "retry": {"retries": 1, "backoff_ms": 1}
        }});
    });
    let run = ragaudit(&["audit", "--config", path_str(&path)]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn stage_commands_fill_their_sections() {
    let ret = ragaudit(&["attribute-retriever", "--config", path_str(&config_path())]);
    assert_eq!(code(&ret), 0);
    let ret: Value = serde_json::from_slice(&ret.stdout).unwrap();
    assert!(ret[0]["retriever"].is_object() && ret[0]["generator"].is_null());

    let generator = ragaudit(&["attribute-generator", "--config", path_str(&config_path())]);
    assert_eq!(code(&generator), 0);
    let generator: Value = serde_json::from_slice(&generator.stdout).unwrap();
    assert!(generator[0]["generator"].is_object() && generator[0]["retriever"].is_null());
}

#[test]
fn metrics_recomputes_stored_report() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixtures().join("golden_report.json");
    let same = ragaudit(&["metrics", "--report", path_str(&golden), "--config", path_str(&config_path())]);
    assert_eq!(code(&same), 0);
    assert_eq!(String::from_utf8(same.stdout).unwrap(), std::fs::read_to_string(&golden).unwrap());

    let narrow = edited_config(dir.path(), |c| c["metrics"]["p_grid"] = serde_json::json!([0.6]));
    let run = ragaudit(&["metrics", "--report", path_str(&golden), "--config", path_str(&narrow)]);
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    let keys: Vec<&String> = report["corpus"]["warg"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["0.6"]);
}

#[test]
fn render_rejects_invalid_reports() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": "1.0.0"}"#).unwrap();
    assert_eq!(code(&ragaudit(&["render", "--report", path_str(&bad)])), 1);
    let ok = ragaudit(&["render", "--report", path_str(&fixtures().join("golden_report.json")), "--format", "ansi"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8(ok.stdout).unwrap().contains("Doc. 1 "));
}

#[test]
fn faithfulness_writes_summary_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let curves = dir.path().join("curves");
    let run = ragaudit(&[
        "faithfulness",
        "--config",
        path_str(&config_path()),
        "--report",
        path_str(&fixtures().join("golden_report.json")),
        "--curves",
        path_str(&curves),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["generator_documents"]["B"], 500);
    let csv = std::fs::read_to_string(curves.join("q0_generator.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "level,morf_value,lerf_value");
}

#[test]
fn bench_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.json");
    std::fs::write(&cfg, r#"{"instances": 4, "repeats": 3, "mc_samples": [10], "methods": ["pmc"]}"#).unwrap();
    let a = ragaudit(&["bench-shap", "--config", path_str(&cfg), "--seed", "9"]);
    let b = ragaudit(&["bench-shap", "--config", path_str(&cfg), "--seed", "9"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    // One method in one cell: header plus a single row.
    assert_eq!(text.lines().count(), 2, "{text}");
}

#[test]
fn audit_over_http_matches_in_process_mock() {
    use std::io::{BufRead, BufReader};

    std::env::set_var("RAGAUDIT_CLI_TEST_TOKEN", "t0ken");
    let mut server = Command::new(env!("CARGO_BIN_EXE_ragaudit"))
        .args(["serve-mock", "--config", path_str(&config_path()), "--addr", "127.0.0.1:0"])
        .args(["--auth-env", "RAGAUDIT_CLI_TEST_TOKEN"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut url = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut url).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = edited_config(dir.path(), |c| {
        c["generator"]["client"] = serde_json::json!({"http": {
            "base_url": url.trim(),
            "auth_env": "RAGAUDIT_CLI_TEST_TOKEN"
        }});
    });
    let remote = ragaudit(&["audit", "--config", path_str(&path)]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(code(&remote), 0, "{}", String::from_utf8_lossy(&remote.stderr));

    let remote: Value = serde_json::from_slice(&remote.stdout).unwrap();
    let local: Value =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden_report.json")).unwrap()).unwrap();
    for (r, l) in remote["queries"].as_array().unwrap().iter().zip(local["queries"].as_array().unwrap()) {
        let (ri, li) = (&r["generator"]["importances"], &l["generator"]["importances"]);
        for (a, b) in ri.as_array().unwrap().iter().zip(li.as_array().unwrap()) {
            assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12);
        }
        assert_eq!(r["alignment"], l["alignment"]);
    }
}
