use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kiqfs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kiqfs"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .env_remove("KIQFS_LLM_API_KEY")
        .output()
        .unwrap()
}

fn inputs(dir: &Path) {
    let text = (0..120)
        .map(|i| format!("w{}", i % 17))
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(
        dir.join("int.jsonl"),
        format!("{{\"id\": \"d0\", \"text\": \"{text}\"}}\n"),
    )
    .unwrap();
    fs::write(
        dir.join("pairs.jsonl"),
        "{\"query_id\": \"Q1\", \"query\": \"w1 w2\", \"references\": [\"w1 w2 w3\"], \"split\": \"test\"}\n",
    )
    .unwrap();
}

const CONFIG: &str = r#"
output_dir = "out"

[queries]
pairs = "pairs.jsonl"

[[corpus]]
id = "int"
sources = "int.jsonl"

[retrieval]
k = 50

[generation]
provider = "openai"
max_retries = 0
timeout_secs = 2
"#;

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    fs::write(
        tmp.path().join("bad.toml"),
        CONFIG.replace("k = 50", "k = 10"),
    )
    .unwrap();
    let out = kiqfs(tmp.path(), &["pipeline", "run", "--config", "bad.toml"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("below the largest cutoff"));
}

#[test]
fn missing_index_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kiqfs(
        tmp.path(),
        &["search", "--index", "nowhere", "--query", "w1"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kiqfs index build"));
}

#[test]
fn unreachable_provider_exits_4_with_partial_results() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kiqfs"))
        .args(["pipeline", "run", "--config", "run.toml"])
        .current_dir(tmp.path())
        .env("RUST_LOG", "error")
        .env("KIQFS_LLM_API_KEY", "test-key")
        .env("KIQFS_LLM_ENDPOINT", "http://127.0.0.1:9/v1")
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let records =
        fs::read_to_string(tmp.path().join("out/summaries/controller.bm25.int.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(rec["query_id"], "Q1");
    assert!(rec["error"].is_string());
    assert!(tmp.path().join("out/runs/bm25.int.trec").exists());
    assert!(tmp.path().join("out/manifest.json").exists());
}

#[test]
fn missing_key_falls_back_to_mock() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    fs::write(tmp.path().join("run.toml"), CONFIG).unwrap();
    let out = kiqfs(tmp.path(), &["pipeline", "run", "--config", "run.toml"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("falling back to the mock provider"));
}
