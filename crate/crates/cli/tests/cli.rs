use std::path::Path;
use std::process::{Command, Output};

const GEN: &str = "num_classes = 2
train_per_class = 3
test_per_class = 2
l = 2
t = 4
m = 4
d_vis = 8
motif_sizes = [3]
seed = 1
";

const RUN: &str = "num_classes = 2
l = 2
t = 4
m = 4
d_vis = 8
scales = [3]
k_init = 3
epochs = 2
d_phi = 8
d_coord = 4
d_edge_c = 4
graph_hidden = 8
membership_hidden = 8
subgraph_budget = 24
batch_size = 12
";

fn musle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_musle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the tiny dataset and trains a bank; returns the temp dir.
fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.toml"), GEN).unwrap();
    std::fs::write(d.join("run.toml"), RUN).unwrap();
    let out = musle(&["gen", "--config", s(&d.join("gen.toml")), "--out", s(&d.join("data"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = musle(&[
        "train",
        "--config",
        s(&d.join("run.toml")),
        "--data",
        s(&d.join("data/train.jsonl")),
        "--out",
        s(&d.join("bank.mus")),
        "--log-json",
        s(&d.join("log.jsonl")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn gen_train_eval_inspect_round_trip() {
    let dir = setup();
    let d = dir.path();
    for f in ["data/train.jsonl", "data/test.jsonl", "data/truth.jsonl", "bank.mus"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    // two cells, two epochs
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let out = musle(&[
        "eval",
        "--bank",
        s(&d.join("bank.mus")),
        "--data",
        s(&d.join("data/test.jsonl")),
        "--report",
        s(&d.join("report.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("top-1"));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["num_videos"], 4);
    assert_eq!(rep["config"]["subgraph_budget"], 24);

    let out = musle(&[
        "inspect",
        "--bank",
        s(&d.join("bank.mus")),
        "--class",
        "1",
        "--scale",
        "3",
        "--data",
        s(&d.join("data/train.jsonl")),
        "--json",
        s(&d.join("inspect.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("inspect.json")).unwrap()).unwrap();
    let total: f64 = dump["kernels"].as_array().unwrap().iter().map(|k| k["weight"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn training_twice_writes_identical_banks() {
    let a = setup();
    let b = setup();
    assert_eq!(
        std::fs::read(a.path().join("bank.mus")).unwrap(),
        std::fs::read(b.path().join("bank.mus")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 1\nnot_a_field = 3\n").unwrap();
    let out = musle(&["train", "--config", s(&cfg), "--data", "x.jsonl", "--out", "y.mus"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&musle(&["train"])), 1);
    assert_eq!(code(&musle(&["frobnicate"])), 1);
    assert_eq!(code(&musle(&["--help"])), 0);
}

#[test]
fn missing_or_malformed_data_is_a_data_error() {
    let dir = setup();
    let d = dir.path();
    let out = musle(&["eval", "--bank", s(&d.join("bank.mus")), "--data", s(&d.join("nope.jsonl")), "--report", s(&d.join("r.json"))]);
    assert_eq!(code(&out), 2);
    std::fs::write(d.join("junk.jsonl"), "{not json\n").unwrap();
    let out = musle(&["eval", "--bank", s(&d.join("bank.mus")), "--data", s(&d.join("junk.jsonl")), "--report", s(&d.join("r.json"))]);
    assert_eq!(code(&out), 2);
    std::fs::write(d.join("junk.mus"), b"garbage").unwrap();
    let out = musle(&["inspect", "--bank", s(&d.join("junk.mus")), "--class", "0", "--scale", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_an_impossible_tolerance_is_numeric_failure() {
    let out = musle(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(code(&musle(&["gradcheck", "--tol", "0"])), 3);
}

#[test]
fn sketchbench_reports_each_size() {
    let out = musle(&["sketchbench", "--pairs", "20", "--d", "16", "--sizes", "32,128", "--unbias-seeds", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("d_sketch    32") && text.contains("d_sketch   128"), "{text}");
    assert!(text.contains("standard errors"));
}
