use std::fs;
use std::path::Path;
use std::process::Command;

const DOC: &str = "# Guide\nHow the system is organised.\n\n## Storage\nBlocks are written once and never edited.\n\nCompaction merges old blocks.\n\n## Network\nPeers gossip membership every second.\n\n### Failures\nA silent peer is suspected after three rounds.\n";

fn h2mt(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_h2mt"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

struct Run {
    tree: Vec<u8>,
    cache: Vec<u8>,
    trace: Vec<u8>,
    answer: Vec<u8>,
}

fn pipeline(dir: &Path) -> Run {
    fs::write(dir.join("doc.md"), DOC).unwrap();
    h2mt(dir, &["build-tree", "--input", "doc.md", "--format", "md", "--max-leaf-tokens", "64", "--out", "tree.json"]);
    h2mt(dir, &["memorize", "--tree", "tree.json", "--policy", "mean", "--out", "cache.h2mc", "--seed", "7"]);
    let answer = h2mt(
        dir,
        &[
            "ask", "--tree", "tree.json", "--cache", "cache.h2mc", "--question", "when is a peer suspected?", "--k", "2",
            "--max-depth", "8", "--budget", "64", "--max-new-tokens", "8", "--trace", "trace.json",
        ],
    );
    Run {
        tree: fs::read(dir.join("tree.json")).unwrap(),
        cache: fs::read(dir.join("cache.h2mc")).unwrap(),
        trace: fs::read(dir.join("trace.json")).unwrap(),
        answer,
    }
}

#[test]
fn build_memorize_ask_is_bitwise_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    assert_eq!(ra.tree, rb.tree);
    assert_eq!(ra.cache, rb.cache);
    assert_eq!(ra.trace, rb.trace);
    assert_eq!(ra.answer, rb.answer);

    let answer: serde_json::Value = serde_json::from_slice(&ra.answer).unwrap();
    assert!(answer["tokens"].as_array().unwrap().len() <= 8);
    let trace: serde_json::Value = serde_json::from_slice(&ra.trace).unwrap();
    assert_eq!(trace["retrieved"], answer["retrieved"]);
}

#[test]
fn ask_refuses_cache_from_another_seed() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_h2mt"))
        .args(["ask", "--tree", "tree.json", "--cache", "cache.h2mc", "--question", "q", "--seed", "8"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn train_emits_loss_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let stdout = h2mt(
        d,
        &["train", "--tree", "tree.json", "--mode", "qa", "--steps", "2", "--lr", "0.001", "--lambda-r", "1", "--seed", "7", "--max-examples", "2", "--weights-out", "w.h2mw"],
    );
    let log: serde_json::Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(log["losses"].as_array().unwrap().len(), 2);
    h2mt(d, &["memorize", "--tree", "tree.json", "--out", "trained.h2mc", "--weights", "w.h2mw"]);
    h2mt(d, &["ask", "--tree", "tree.json", "--cache", "trained.h2mc", "--question", "q", "--weights", "w.h2mw", "--max-new-tokens", "2"]);
}

#[test]
fn gmm_tree_then_bench() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let chunks: String = (0..6).map(|i| format!("{{\"text\": \"chunk {i} is about topic {}\"}}\n", i % 2)).collect();
    fs::write(d.join("chunks.jsonl"), chunks).unwrap();
    h2mt(d, &["gmm-tree", "--chunks", "chunks.jsonl", "--cache-out", "c.h2mc", "--tree-out", "t.json", "--k-g", "2", "--max-depth", "3", "--seed", "3"]);
    fs::write(d.join("q.jsonl"), "{\"question\": \"topic 1?\", \"answer\": \"chunk 1\"}\n").unwrap();
    h2mt(d, &["bench", "--tree", "t.json", "--cache", "c.h2mc", "--questions", "q.jsonl", "--out", "report.json", "--repeats", "2", "--flat-repeats", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    let r = &report["reports"][0];
    assert!(r["n_ret"].as_u64().unwrap() <= 64);
    assert!(r["flat_ttft_ms"].is_number());
    assert!(r["rouge_l"].is_number());
}
