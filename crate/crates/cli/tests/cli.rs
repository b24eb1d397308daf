use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fgnn_core::fgnn::FgnnStack;
use fgnn_core::learn::desk_architecture;
use fgnn_core::synth::read_jsonl;
use serde_json::Value;

fn fgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgnn")).args(args).output().expect("spawn fgnn")
}

fn code(args: &[&str]) -> i32 {
    fgnn(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, dataset: &str, seed: &str, counts: [&str; 3], length: &str) {
    let out = fgnn(&[
        "gen", "--dataset", dataset, "--seed", seed, "--train", counts[0], "--val", counts[1], "--test", counts[2],
        "--length", length, "--window", "4", "--budget", "2", "--out", s(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_writes_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "1", "0", ["2", "1", "3"], "8");
    for (split, n) in [("train", 2), ("val", 1), ("test", 3)] {
        let text = fs::read_to_string(dir.path().join(format!("{split}.jsonl"))).unwrap();
        // one header line, then one line per instance
        assert_eq!(text.lines().count(), n + 1, "{split}");
        let (header, data) = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(header.count, n);
        assert_eq!(data.len(), n);
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn gen_is_deterministic_and_seed_dependent() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), "3", "7", ["4", "0", "0"], "10");
    gen(b.path(), "3", "7", ["4", "0", "0"], "10");
    gen(c.path(), "3", "8", ["4", "0", "0"], "10");
    let read = |d: &Path| fs::read(d.join("train.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["solve", "--method", "dp"]), 2);
    assert_eq!(code(&["solve", "--method", "nope", "--in", "x", "--out", "y"]), 2);
    assert_eq!(code(&["gen", "--dataset", "1", "--length", "4", "--window", "9", "--out", s(dir.path())]), 2);
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("out.jsonl");
    assert_eq!(code(&["solve", "--method", "dp", "--in", s(&missing), "--out", s(&out)]), 3);

    // 2^30 joint states is past the brute-force limit
    gen(dir.path(), "1", "0", ["0", "0", "1"], "30");
    let test = dir.path().join("test.jsonl");
    assert_eq!(code(&["solve", "--method", "brute", "--in", s(&test), "--out", s(&out)]), 4);
    let preds = jsonl(&out);
    assert!(preds[0]["error"].is_string());
}

#[test]
fn dp_recovers_every_label() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "3", "1", ["0", "0", "12"], "12");
    let test = dir.path().join("test.jsonl");
    let dp = dir.path().join("dp.jsonl");
    let brute = dir.path().join("brute.jsonl");
    assert_eq!(code(&["solve", "--method", "dp", "--in", s(&test), "--out", s(&dp)]), 0);
    assert_eq!(code(&["solve", "--method", "brute", "--in", s(&test), "--out", s(&brute)]), 0);
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("dp.jsonl.summary.json")).unwrap()).unwrap();
    let (_, data) = read_jsonl(fs::read(&test).unwrap().as_slice()).unwrap();
    for ((p, q), inst) in jsonl(&dp).iter().zip(jsonl(&brute)).zip(&data) {
        let best = fgnn_core::pgm::score(&inst.graph, &inst.label).unwrap();
        assert!((p["score"].as_f64().unwrap() - best).abs() <= 1e-9);
        assert!((q["score"].as_f64().unwrap() - best).abs() <= 1e-9);
    }
    // the generator breaks ties the same way the DP does
    assert_eq!(summary["agreement_mean"].as_f64().unwrap(), 1.0);
}

#[test]
fn exact_emulator_decodes_like_max_product() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "2", "3", ["0", "0", "6"], "8");
    let test = dir.path().join("test.jsonl");
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for iters in ["0", "2", "4"] {
        assert_eq!(code(&["solve", "--method", "maxprod", "--iters", iters, "--in", s(&test), "--out", s(&a)]), 0);
        assert_eq!(code(&["solve", "--method", "fgnn-exact", "--iters", iters, "--in", s(&test), "--out", s(&b)]), 0);
        let pa: Vec<Value> = jsonl(&a).into_iter().map(|v| v["assignment"].clone()).collect();
        let pb: Vec<Value> = jsonl(&b).into_iter().map(|v| v["assignment"].clone()).collect();
        assert_eq!(pa, pb, "iters {iters}");
    }
}

#[test]
fn zero_epochs_writes_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "1", "2", ["3", "0", "0"], "8");
    let train = dir.path().join("train.jsonl");
    let params = dir.path().join("p.json");
    assert_eq!(
        code(&["train", "--data", s(&train), "--epochs", "0", "--width", "6", "--seed", "5", "--out", s(&params)]),
        0
    );
    let got = FgnnStack::from_json(&fs::read_to_string(&params).unwrap()).unwrap();
    let (_, data) = read_jsonl(fs::read(&train).unwrap().as_slice()).unwrap();
    let f = &data[0].features;
    assert_eq!(got, desk_architecture(f.node_dim(), f.factor_dim(), f.edge_dim(), 6, 2, 5));
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "1", "0", ["0", "0", "4"], "8");
    let test = dir.path().join("test.jsonl");
    let out = dir.path().join("mp.jsonl");
    assert_eq!(code(&["--jobs", "2", "solve", "--method", "maxprod", "--in", s(&test), "--out", s(&out)]), 0);
    let manifest = dir.path().join("mp.jsonl.manifest.json");
    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "solve");
    assert_eq!(code(&["replay", "--manifest", s(&manifest)]), 0);

    // a different dataset under the same path breaks the input digest
    gen(dir.path(), "1", "1", ["0", "0", "4"], "8");
    assert_eq!(code(&["replay", "--manifest", s(&manifest)]), 1);
}
