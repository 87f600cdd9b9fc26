use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SYNTH: &str = r#"{
  "model": {"type": "mlp", "layers": 2, "hidden": 12},
  "dataset": "synth",
  "synth": {"n_train": 300, "n_test": 150, "n_classes": 3, "dim": 6, "separation": 8.0},
  "optimizer": {"lr": 0.003, "batch_size": 32},
  "schedule": {"epochs_train": 3, "fine_tune_epochs": 1, "prune_interval": 1},
  "chunk_fraction": 0.25,
  "seed": 4
}"#;

fn bmrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmrs")).args(args).env_remove("BMRS_DATA_DIR").output().expect("run bmrs")
}

fn synth_config(dir: &Path) -> PathBuf {
    let p = dir.join("synth.json");
    std::fs::write(&p, SYNTH).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn train_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = bmrs(&["train", "--config", s(&cfg), "--criterion", "snr", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["run.csv", "model.ckpt", "manifest.json"] {
            assert!(out.join(f).is_file(), "{f} missing");
        }
    }
    assert_eq!(std::fs::read(a.join("run.csv")).unwrap(), std::fs::read(b.join("run.csv")).unwrap());

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 40);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(manifest["config"]["criterion"]["criterion"], "snr");

    // Re-ingesting the manifest reproduces the run.
    let c = tmp.path().join("c");
    let o = bmrs(&["train", "--config", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(a.join("run.csv")).unwrap(), std::fs::read(c.join("run.csv")).unwrap());

    let mut rdr = csv::Reader::from_path(a.join("run.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    for col in ["epoch", "phase", "accuracy", "compression", "alive_counts", "criterion", "seed"] {
        assert!(headers.iter().any(|h| h == col), "column {col}");
    }
    assert_eq!(rdr.records().count(), 4);
}

#[test]
fn none_criterion_never_compresses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = tmp.path().join("none");
    assert_eq!(code(&bmrs(&["train", "--config", s(&cfg), "--criterion", "none", "--out", s(&out)])), 0);
    let mut rdr = csv::Reader::from_path(out.join("run.csv")).unwrap();
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[3].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn prune_post_emits_curve_with_origin_and_spearman() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(code(&bmrs(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let post = tmp.path().join("post");
    let o = bmrs(&["prune-post", "--config", s(&cfg), "--checkpoint", s(&run.join("model.ckpt")), "--out", s(&post)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(post.join("curve.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(&rows[0][0], "0");
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 0.0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let trained_acc = manifest["final_metrics"]["test_accuracy"].as_f64().unwrap();
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), trained_acc);

    let mut sp = csv::Reader::from_path(post.join("spearman.csv")).unwrap();
    let header = sp.headers().unwrap().clone();
    let first = sp.records().next().unwrap().unwrap();
    assert_eq!(&header[1], "bmrs_n");
    assert_eq!(&first[0], "bmrs_n");
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn checkpoint_model_mismatch_is_a_config_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(code(&bmrs(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let other = tmp.path().join("other.json");
    std::fs::write(&other, SYNTH.replace("\"layers\": 2", "\"layers\": 3")).unwrap();
    let post = tmp.path().join("post");
    let o = bmrs(&["prune-post", "--config", s(&other), "--checkpoint", s(&run.join("model.ckpt")), "--out", s(&post)]);
    assert_eq!(code(&o), 2);
    assert!(!post.join("curve.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = tmp.path().join("o");
    assert_eq!(code(&bmrs(&["train", "--config", s(&cfg), "--criterion", "magic", "--out", s(&out)])), 2);
    assert_eq!(code(&bmrs(&["sweep-p1", "--config", s(&cfg), "--p1", "23", "--p2", "23", "--out", s(&out)])), 2);
    assert_eq!(code(&bmrs(&["train", "--config", s(&cfg), "--criterion", "l2", "--out", s(&out)])), 2);
    assert_eq!(code(&bmrs(&["train", "--config", s(&tmp.path().join("missing.json")), "--out", s(&out)])), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"type": "mlp", "layers": 2, "hidden": 12}, "dataset": "synth", "colour": 3}"#).unwrap();
    assert_eq!(code(&bmrs(&["train", "--config", s(&bad), "--out", s(&out)])), 2);
    // MNIST config pointed at an empty directory.
    let empty = tempfile::tempdir().unwrap();
    let o = bmrs(&["train", "--data-dir", s(empty.path()), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.join("run.csv").exists() && !out.join("manifest.json").exists());
}

#[test]
fn sweep_writes_one_row_per_p1_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = bmrs(&["sweep-p1", "--config", s(&cfg), "--p1", "4,8", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let p1s: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(p1s, vec!["4", "8"]);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn verify_reports_every_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bmrs(&["verify", "--profile", "quick", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(rep["all_passed"], true);
    let suites = rep["suites"].as_array().unwrap();
    assert!(suites.len() >= 8);
    for s in suites {
        assert!(s["checks"].as_u64().unwrap() > 0);
        assert_eq!(s["failed"], 0);
    }
}
