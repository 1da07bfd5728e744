use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"{
  "network": {"hidden_layers": 2, "hidden_width": 8},
  "collocation": {"interior": 200, "inlet": 50, "outlet": 50, "initial": 50},
  "training": {"iterations": 20, "batch_size": 100},
  "prediction": {"n_times": 11, "n_positions": 6}
}"#;

fn nanoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nanoflow"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(nanoflow(&["--help"]).status.code(), Some(0));
    assert_eq!(nanoflow(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(nanoflow(&[]).status.code(), Some(1));
    assert_eq!(nanoflow(&["frobnicate"]).status.code(), Some(1));
    let o = nanoflow(&["invert", "--out-dir", "unused"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--dataset"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_nanoflow"))
        .args(["solve", "--out-dir", "unused"])
        .env("NANOFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_problems_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (text, needle) in [
        (r#"{"porosty": 0.3}"#, "porosty"),
        (r#"{"training": {"lr": 1}}"#, "lr"),
        (r#"{"porosity": 1.4}"#, "porosity"),
        ("{\n  \"porosity\": 0.3,,\n}", "line 2"),
    ] {
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, text).unwrap();
        let o = nanoflow(&["solve", "--config", s(&cfg), "--out-dir", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(needle), "{}", stderr(&o));
    }
    let o = nanoflow(&["solve", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk");
    std::fs::write(&junk, "not,a,dataset\n").unwrap();
    let out = dir.path().join("out");
    let o = nanoflow(&["invert", "--dataset", s(&junk), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = nanoflow(&["predict", "--checkpoint", s(&junk), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn manifest_hashes_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = nanoflow(&["train-forward", "--config", s(&cfg), "--seed", "9", "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "train-forward");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["preset"], "balanced");
    assert_eq!(m["config"]["training"]["iterations"], 20);
    let files = m["files"].as_array().unwrap();
    let mut names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        ["checkpoint.bin", "ensemble_btc.csv", "ensemble_retention.csv", "trace.csv"]
    );
    for f in files {
        let bytes = std::fs::read(out.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"], bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }

    // 50 default samples plus t, mean, std, min, max
    let btc = std::fs::read_to_string(out.join("ensemble_btc.csv")).unwrap();
    let header: Vec<&str> = btc.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 55);
    assert_eq!(&header[..5], ["t_s", "mean", "std", "min", "max"]);
    assert_eq!(btc.lines().count(), 12);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
}

#[test]
fn seed_changes_the_synthetic_noise() {
    let dir = tempfile::tempdir().unwrap();
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        assert_eq!(nanoflow(&["synth", "--seed", seed, "--out-dir", s(&out)]).status.code(), Some(0));
        std::fs::read_to_string(out.join("dataset.csv")).unwrap()
    };
    let (a, b) = (read("1"), read("2"));
    assert_ne!(a, b);
    assert_eq!(a.lines().next().unwrap(), "kind,coord,value,truth");
    assert_eq!(a.lines().count(), 151);
}

#[test]
fn predict_reproduces_training_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let train = dir.path().join("train");
    assert_eq!(
        nanoflow(&["train-forward", "--config", s(&cfg), "--seed", "4", "--out-dir", s(&train)])
            .status
            .code(),
        Some(0)
    );
    let pred = dir.path().join("pred");
    let ckpt = train.join("checkpoint.bin");
    let o = nanoflow(&[
        "predict", "--config", s(&cfg), "--seed", "4", "--checkpoint", s(&ckpt), "--out-dir", s(&pred),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["ensemble_btc.csv", "ensemble_retention.csv"] {
        assert_eq!(
            std::fs::read(train.join(f)).unwrap(),
            std::fs::read(pred.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn explicit_noise_is_reported_as_custom_preset() {
    let dir = tempfile::tempdir().unwrap();
    let preset = |text: &str, name: &str| {
        let cfg = dir.path().join(format!("{name}.json"));
        std::fs::write(&cfg, text).unwrap();
        let out = dir.path().join(name);
        assert_eq!(nanoflow(&["solve", "--config", s(&cfg), "--out-dir", s(&out)]).status.code(), Some(0));
        let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["preset"].as_str().unwrap().to_string()
    };
    assert_eq!(preset(r#"{"training": {"noise_preset": "paper"}}"#, "paper"), "paper");
    assert_eq!(
        preset(r#"{"training": {"noise": {"sigma_u": 0.01, "sigma_f": 1e-6, "sigma_b": 0.01}}}"#, "custom"),
        "custom"
    );
}
