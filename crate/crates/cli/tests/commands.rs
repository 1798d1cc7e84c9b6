use std::fs;
use std::path::Path;
use std::process::Command;

/// Runs a whitespace-separated command line and returns stdout.
fn kiqfs(dir: &Path, line: &str) -> String {
    let args: Vec<&str> = line.split_whitespace().collect();
    let out = Command::new(env!("CARGO_BIN_EXE_kiqfs"))
        .args(&args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn inputs(dir: &Path) {
    let words = |seed: usize, n: usize| {
        (0..n)
            .map(|i| format!("w{}", (i * 5 + seed) % 23))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for tag in ["int", "ext"] {
        let lines: String = (0..4)
            .map(|d| format!("{{\"id\": \"d{d}\", \"text\": \"{}\"}}\n", words(d, 130)))
            .collect();
        fs::write(dir.join(format!("{tag}.jsonl")), lines).unwrap();
    }
    let pairs: String = (0..3)
        .map(|q| {
            format!(
                "{{\"query_id\": \"Q{q}\", \"query\": \"w{q} w{}\", \"references\": [\"{}\"], \"split\": \"test\"}}\n",
                q + 4,
                words(q, 30)
            )
        })
        .collect();
    fs::write(dir.join("pairs.jsonl"), pairs).unwrap();
}

#[test]
fn manual_workflow_produces_labeled_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    inputs(d);
    let ingested = kiqfs(d, "ingest --sources int.jsonl --tag int --out c/int");
    assert!(ingested.starts_with("8 chunks"), "{ingested}");
    kiqfs(d, "ingest --sources ext.jsonl --tag ext --out c/ext");
    let merged = kiqfs(d, "corpus merge --a c/int --b c/ext --out c/aug");
    assert!(merged.starts_with("16 chunks"), "{merged}");
    kiqfs(d, "index build --corpus c/aug");

    let hits = kiqfs(d, "search --index c/aug --query w3 --k 3");
    assert_eq!(hits.lines().count(), 3);
    assert!(hits.lines().next().unwrap().starts_with("1\t"));

    kiqfs(
        d,
        "search --index c/aug --queries pairs.jsonl --k 10 --out bm25.trec",
    );
    let run = fs::read_to_string(d.join("bm25.trec")).unwrap();
    assert_eq!(run.lines().count(), 30);

    let pooled = kiqfs(
        d,
        "pool build --run bm25.trec --depth 4 --corpus c/aug --pairs pairs.jsonl --tasks tasks.jsonl --out pool.jsonl",
    );
    assert!(pooled.contains("12 pairs over 3 queries"), "{pooled}");
    let tasks = fs::read_to_string(d.join("tasks.jsonl")).unwrap();
    assert_eq!(tasks.lines().count(), 3);

    for mode in ["controller", "naive"] {
        kiqfs(
            d,
            &format!("summarize --run bm25.trec --corpus c/aug --pairs pairs.jsonl --mode {mode} --shots 1 --out {mode}.jsonl"),
        );
    }
    let report = kiqfs(
        d,
        "eval summary --summaries controller.jsonl --summaries naive.jsonl --pairs pairs.jsonl --out summary.tsv",
    );
    let rows: Vec<Vec<&str>> = report.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["system", "corpus", "R1", "R2", "RSU4"]);
    assert_eq!(rows[1][..2], ["controller/bm25/aug/1shot", "aug"]);
    assert_eq!(rows[2][..2], ["naive/bm25/aug/1shot", "aug"]);
    assert!(d.join("summary.json").exists());
}
