mod common;

use common::overfit_corpus;
use mlkg::cli::run_command;
use mlkg::corpus::write_corpus;
use std::path::Path;

fn run(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    run_command(std::iter::once("mlkg").chain(args.iter().copied()), &mut out).map_err(|e| e.to_string())?;
    Ok(String::from_utf8(out).unwrap())
}

fn build(dir: &Path) -> String {
    let corpus = dir.join("corpus.jsonl");
    let mut buf = Vec::new();
    write_corpus(&overfit_corpus(), &mut buf).unwrap();
    std::fs::write(&corpus, buf).unwrap();
    let graph = dir.join("graph.jsonl");
    run(&["build-graph", "--corpus", corpus.to_str().unwrap(), "--out", graph.to_str().unwrap()]).unwrap();
    graph.display().to_string()
}

#[test]
fn stats_lists_every_level() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = build(tmp.path());
    let out = run(&["stats", "--graph", &graph]).unwrap();
    for label in ["entities", "chunks", "documents", "edges cd"] {
        assert!(out.lines().any(|l| l.starts_with(label)), "{label} missing from {out}");
    }
    let documents = out.lines().find(|l| l.starts_with("documents")).unwrap();
    assert_eq!(documents.split_whitespace().last(), Some("12"));
}

#[test]
fn missing_graph_names_the_flag() {
    let err = run(&["stats"]).unwrap_err();
    assert!(err.contains("--graph"), "{err}");
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = build(tmp.path());
    let corpus = tmp.path().join("corpus.jsonl");
    let args = ["build-graph", "--corpus", corpus.to_str().unwrap(), "--out", &graph];
    let err = run(&args).unwrap_err();
    assert!(err.contains("--force"), "{err}");
    let mut forced = args.to_vec();
    forced.push("--force");
    run(&forced).unwrap();
}

#[test]
fn manifest_output_hashes_are_reproducible() {
    let hashes = |dir: &Path| {
        build(dir);
        let text = std::fs::read_to_string(dir.join("graph.jsonl.manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["outputs"].as_array().unwrap().iter().map(|o| o[1].as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = hashes(a.path());
    assert_eq!(first.len(), 1);
    assert_eq!(first[0].len(), 64);
    assert_eq!(first, hashes(b.path()));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = build(tmp.path());
    let err = run(&["stats", "--graph", &graph, "--set", "hiden_dim=8"]).unwrap_err();
    assert!(err.contains("hiden_dim"), "{err}");
}
