use std::path::Path;
use std::process::{Command, Output};

const GEN: &str = "seed = 3\nn_train = 60\nn_val = 20\nn_test = 40\nheight = 32\nwidth = 32\n";
const PIPE: &str = "embed_dim = 8\nk_directions = 6\nk_used = 2\nepochs = 2\nmil_epochs = 2\n";

fn biaslens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaslens"))
        .current_dir(dir)
        .env("BIASLENS_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = biaslens(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn full_run(dir: &Path) {
    std::fs::write(dir.join("gen.toml"), GEN).unwrap();
    std::fs::write(dir.join("pipe.toml"), PIPE).unwrap();
    ok(dir, &["generate", "--gen-config", "gen.toml", "--out", "data"]);
    let stages: [&[&str]; 9] = [
        &["train-klotski", "--data", "data"],
        &["embed", "--data", "data", "--split", "train"],
        &["embed", "--data", "data", "--split", "test"],
        &["bd2a", "--polarity", "both"],
        &["select"],
        &["train-mil", "--data", "data"],
        &["eval", "--data", "data"],
        &["sweep", "--data", "data"],
        &["curve"],
    ];
    for s in stages {
        let mut args = vec!["--config", "pipe.toml", "--threads", "2", "--out", "w"];
        args.extend_from_slice(s);
        ok(dir, &args);
    }
}

#[test]
fn pipeline_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for f in [
        "data/train.jsonl",
        "data/test.jsonl",
        "data/images/test_00007.png",
        "w/klotski.blsc",
        "w/embeddings_train.blem",
        "w/embeddings_test.blem",
        "w/directions_positive.bldb",
        "w/directions_negative.bldb",
        "w/split.json",
        "w/mil.blsc",
        "w/report.json",
        "w/sweep.csv",
        "w/curve.csv",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("w/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["k_used"], 2);
    for part in ["rest", "biased", "drop"] {
        assert!(report[part].get("accuracy").is_some(), "report lacks {part}.accuracy");
    }
}

#[test]
fn too_many_directions_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    full_run(d.path());
    let out = biaslens(d.path(), &["--config", "pipe.toml", "--out", "w", "bd2a", "--k", "80"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("80") && msg.contains('8'), "{msg}");

    std::fs::write(d.path().join("bad.toml"), "k_directions = 80\n").unwrap();
    let out = biaslens(d.path(), &["--config", "bad.toml", "--out", "w", "bd2a"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("80") && msg.contains("64"), "{msg}");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(biaslens(d.path(), &["no-such-stage"]).status.code(), Some(1));
    // bad arguments are reported before any missing input
    assert_eq!(biaslens(d.path(), &["select", "--theta", "1.5"]).status.code(), Some(1));
    assert_eq!(biaslens(d.path(), &["sweep", "--data", "data", "--theta", "0"]).status.code(), Some(1));
    // missing manifest is a data error
    assert_eq!(
        biaslens(d.path(), &["train-klotski", "--data", "nowhere"]).status.code(),
        Some(2)
    );
    std::fs::create_dir(d.path().join("data")).unwrap();
    std::fs::write(d.path().join("data/train.jsonl"), "{\"id\": \"a\", \"path\": \"a.png\", \"label\": 0}\n").unwrap();
    assert_eq!(
        biaslens(d.path(), &["train-klotski", "--data", "data"]).status.code(),
        Some(2)
    );
    let out = Command::new(env!("CARGO_BIN_EXE_biaslens"))
        .current_dir(d.path())
        .env("BIASLENS_LOG", "verbose")
        .arg("curve")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
