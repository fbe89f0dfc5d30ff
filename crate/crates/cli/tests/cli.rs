//! End-to-end tests of the `nfp` binary: every stage runs through files on
//! disk, reruns are byte-identical, and failures exit nonzero with one JSON
//! object on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfp")).args(args).output().expect("spawn nfp")
}

fn ok(args: &[&str]) -> Output {
    let out = nfp(args);
    assert!(
        out.status.success(),
        "nfp {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with_kind(args: &[&str], kind: &str) {
    let out = nfp(args);
    assert!(!out.status.success(), "nfp {:?} unexpectedly succeeded", args);
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is a JSON error report");
    assert_eq!(err["error"]["kind"], kind, "stderr: {err}");
}

struct Workspace {
    root: PathBuf,
}

impl Workspace {
    fn new(name: &str) -> Self {
        let root = std::env::temp_dir().join(format!("nfp-cli-test-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        Self { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn write_config(&self) -> String {
        let config = serde_json::json!({
            "schema_version": 1,
            "phantom": {
                "class_counts": [6, 6, 6, 6],
                "dataset_seed": 7,
                "patch_size": 16,
                "radius_range": [2.0, 2.6],
                "texture_amplitude": 120.0,
                "noise_sigma": 20.0
            },
            "radiomics": {
                "bin_width": 25.0,
                "shape": true,
                "first_order": true,
                "glcm": true,
                "glrlm": true,
                "wavelet": true
            },
            "selection": {
                "variance_threshold": 0.8,
                "k_best": 40,
                "lambda": 0.02,
                "lambda_grid_points": 50,
                "cv_folds": 5,
                "seed": 0
            },
            "model": {
                "encoder": { "channels": 4, "blocks": 2 },
                "conv_width": 16,
                "fusion_width": 8
            },
            "trainer": {
                "learning_rate": 0.005,
                "momentum": 0.9,
                "batch_size": 8,
                "max_epochs": 2,
                "patience": 5,
                "seed": 0
            },
            "eval": {
                "train_fraction": 0.8,
                "svm_c": 1.0,
                "seeds": [0]
            }
        });
        let path = self.path("config.json");
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        path.display().to_string()
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.root);
    }
}

fn read_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn pipeline_end_to_end_and_deterministic() {
    let ws = Workspace::new("e2e");
    let cfg = ws.write_config();

    ok(&["phantom-gen", "--out", &ws.s("data"), "--config", &cfg]);
    ok(&["extract", "--data", &ws.s("data"), "--out", &ws.s("features.csv"), "--config", &cfg]);
    ok(&["extract", "--data", &ws.s("data"), "--out", &ws.s("features2.csv"), "--config", &cfg]);
    assert_eq!(
        read_bytes(&ws.path("features.csv")),
        read_bytes(&ws.path("features2.csv")),
        "extract rerun must be byte-identical"
    );

    ok(&["select", "--features", &ws.s("features.csv"), "--out", &ws.s("sel"), "--config", &cfg, "--seed", "0"]);
    for artifact in ["pipeline.json", "rf_train.csv", "rf_test.csv", "split.json"] {
        assert!(ws.path("sel").join(artifact).exists(), "missing sel/{artifact}");
    }

    for model in ["svm", "cnn", "fusion"] {
        ok(&[
            "train", "--model", model, "--data", &ws.s("data"), "--select-dir", &ws.s("sel"),
            "--out", &ws.s("models"), "--config", &cfg,
        ]);
    }
    ok(&[
        "train", "--model", "fusion", "--data", &ws.s("data"), "--select-dir", &ws.s("sel"),
        "--out", &ws.s("models2"), "--config", &cfg,
    ]);
    for artifact in ["fusion.json", "fusion.raw", "fusion.pipeline.json", "fusion.log.json"] {
        assert_eq!(
            read_bytes(&ws.path("models").join(artifact)),
            read_bytes(&ws.path("models2").join(artifact)),
            "train rerun must be byte-identical: {artifact}"
        );
    }

    for (args, method) in [
        (vec!["--model", "svm"], "RF+SVM"),
        (vec!["--model", "cnn"], "CNN"),
        (vec!["--model", "fusion"], "Fusion"),
        (vec!["--combine", "svm", "cnn"], "RF+SVM+CNN"),
    ] {
        let metrics_path = ws.s(&format!("metrics_{method}.json"));
        let data = ws.s("data");
        let sel = ws.s("sel");
        let models = ws.s("models");
        let mut full = vec!["eval"];
        full.extend(args);
        full.extend(["--data", &data, "--select-dir", &sel, "--model-dir", &models, "--out", &metrics_path]);
        let out = ok(&full);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("accuracy:"), "eval output: {stdout}");
        let metrics: serde_json::Value =
            serde_json::from_slice(&read_bytes(Path::new(&metrics_path))).unwrap();
        assert_eq!(metrics["method"], method);
        assert_eq!(metrics["seed"], 0);
        assert!(metrics["accuracy"].as_f64().unwrap() >= 0.0);
        let confusion = metrics["confusion"].as_array().unwrap();
        assert_eq!(confusion.len(), 4);
        assert_eq!(confusion[0].as_array().unwrap().len(), 4);
    }
}

#[test]
fn eval_with_wrong_pipeline_is_a_hard_error() {
    let ws = Workspace::new("hash");
    let cfg = ws.write_config();
    ok(&["phantom-gen", "--out", &ws.s("data"), "--config", &cfg]);
    ok(&["extract", "--data", &ws.s("data"), "--out", &ws.s("features.csv"), "--config", &cfg]);
    ok(&["select", "--features", &ws.s("features.csv"), "--out", &ws.s("sel"), "--config", &cfg, "--seed", "0"]);
    ok(&["select", "--features", &ws.s("features.csv"), "--out", &ws.s("sel_other"), "--config", &cfg, "--seed", "1"]);
    ok(&["train", "--model", "svm", "--select-dir", &ws.s("sel"), "--out", &ws.s("models"), "--config", &cfg]);
    fails_with_kind(
        &[
            "eval", "--model", "svm", "--select-dir", &ws.s("sel_other"),
            "--model-dir", &ws.s("models"), "--out", &ws.s("metrics.json"),
        ],
        "hash_mismatch",
    );
    assert!(!ws.path("metrics.json").exists(), "no metrics on failure");
}

#[test]
fn config_schema_violations_are_rejected() {
    let ws = Workspace::new("schema");
    let cfg = ws.write_config();

    // unknown key
    let mut raw: serde_json::Value =
        serde_json::from_slice(&read_bytes(Path::new(&cfg))).unwrap();
    raw["phantom"]["unexpected_knob"] = serde_json::json!(1);
    fs::write(ws.path("bad1.json"), serde_json::to_string(&raw).unwrap()).unwrap();
    fails_with_kind(&["phantom-gen", "--out", &ws.s("d"), "--config", &ws.s("bad1.json")], "config");

    // wrong schema version
    let mut raw: serde_json::Value =
        serde_json::from_slice(&read_bytes(Path::new(&cfg))).unwrap();
    raw["schema_version"] = serde_json::json!(99);
    fs::write(ws.path("bad2.json"), serde_json::to_string(&raw).unwrap()).unwrap();
    fails_with_kind(&["phantom-gen", "--out", &ws.s("d"), "--config", &ws.s("bad2.json")], "config");

    // geometry that cannot fit the patch
    let mut raw: serde_json::Value =
        serde_json::from_slice(&read_bytes(Path::new(&cfg))).unwrap();
    raw["phantom"]["radius_range"] = serde_json::json!([8.0, 9.0]);
    fs::write(ws.path("bad3.json"), serde_json::to_string(&raw).unwrap()).unwrap();
    fails_with_kind(&["phantom-gen", "--out", &ws.s("d"), "--config", &ws.s("bad3.json")], "config");
}

#[test]
fn missing_inputs_fail_cleanly() {
    let ws = Workspace::new("missing");
    fails_with_kind(
        &["extract", "--data", &ws.s("nope"), "--out", &ws.s("f.csv")],
        "io",
    );
    fails_with_kind(
        &["train", "--model", "svm", "--select-dir", &ws.s("nope"), "--out", &ws.s("m")],
        "io",
    );
}
