use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn eyear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eyear"))
        .args(args)
        .env_remove("EYEAR_THREADS")
        .output()
        .expect("spawn eyear")
}

fn ok(args: &[&str]) -> Output {
    let out = eyear(args);
    assert!(
        out.status.success(),
        "eyear {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// File name → bytes for every file in `dir` except the run manifest.
fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if path.is_file() && name != "run.json" {
            out.insert(name, fs::read(&path).unwrap());
        }
    }
    out
}

const SMALL: &str = r#"{
  "synth": {"words_per_scene": 6, "subjects": 3, "embed_dim": 8},
  "train": {
    "stage1_epochs": 3, "stage2_epochs": 3, "batch_scenes": 4,
    "model": {"hidden": 6, "key_dim": 4, "mlp_width": 4}
  }
}"#;

struct Suite {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn suite() -> Suite {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("config.json");
    fs::write(&config, SMALL).unwrap();
    let gen = root.join("gen");
    ok(&["gen", "--scenes", "20", "--seed", "3", "--config", s(&config), "--out", s(&gen)]);
    Suite {
        data: gen.join("manifest.json"),
        _dir: dir,
        root,
        config,
    }
}

#[test]
fn gen_is_byte_deterministic_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["gen", "--scenes", "12", "--words", "5", "--seed", "7", "--out", s(out)]);
    }
    let (ca, cb) = (contents(&a), contents(&b));
    assert_eq!(ca.len(), 12 + 2);
    assert_eq!(ca, cb);

    let manifest: Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 7);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), ca.len());
    for o in outputs {
        let bytes = fs::read(a.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

#[test]
fn single_subject_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eyear(&["gen", "--subjects", "1", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&eyear(&["frobnicate"])), 1);
    assert_eq!(code(&eyear(&["train"])), 1);
    assert_eq!(code(&eyear(&["--help"])), 0);
}

#[test]
fn bad_thread_count_and_bad_config_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_eyear"))
        .args(["gen", "--scenes", "10", "--out", s(dir.path())])
        .env("EYEAR_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"synth": {"kappa": -1.0}}"#).unwrap();
    assert_eq!(code(&eyear(&["gen", "--config", s(&cfg), "--out", s(dir.path())])), 2);
    fs::write(&cfg, r#"{"not_a_section": 1}"#).unwrap();
    assert_eq!(code(&eyear(&["gen", "--config", s(&cfg), "--out", s(dir.path())])), 2);
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eyear(&["train", "--data", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn default_learning_rate_and_mse_only_stage() {
    let su = suite();
    let out = su.root.join("t");
    ok(&["train", "--data", s(&su.data), "--config", s(&su.config), "--stage", "mse-only", "--out", s(&out)]);
    let ck: Value = serde_json::from_slice(&fs::read(out.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["config"]["optimizer"]["lr"].as_f64(), Some(1e-4));
    assert_eq!(ck["finished"], true);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,stage,train_loss,val_loss,alpha"));
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(1) == Some("mse")), "{log}");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let su = suite();
    let (whole, part) = (su.root.join("whole"), su.root.join("part"));
    let common = ["--data", s(&su.data), "--config", s(&su.config)];
    let mut args = vec!["train", "--max-epochs", "4", "--out", s(&whole)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--max-epochs", "2", "--out", s(&part)];
    args.extend(common);
    ok(&args);
    let first = part.join("checkpoint.json");
    let resumed = su.root.join("resumed");
    ok(&["train", "--data", s(&su.data), "--resume", s(&first), "--max-epochs", "2", "--out", s(&resumed)]);
    assert_eq!(
        fs::read(whole.join("checkpoint.json")).unwrap(),
        fs::read(resumed.join("checkpoint.json")).unwrap()
    );
    assert_eq!(
        fs::read(whole.join("train_log.csv")).unwrap(),
        fs::read(resumed.join("train_log.csv")).unwrap()
    );
}

#[test]
fn ablate_full_equals_train_then_eval() {
    let su = suite();
    let (train, eval, abl) = (su.root.join("train"), su.root.join("eval"), su.root.join("abl"));
    ok(&["train", "--data", s(&su.data), "--config", s(&su.config), "--out", s(&train)]);
    let ck = train.join("checkpoint.json");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&su.data), "--config", s(&su.config), "--out", s(&eval)]);
    ok(&["ablate", "--data", s(&su.data), "--config", s(&su.config), "--variant", "full", "--out", s(&abl)]);
    let full = abl.join("full");
    assert_eq!(fs::read(&ck).unwrap(), fs::read(full.join("checkpoint.json")).unwrap());
    assert_eq!(
        fs::read(eval.join("metrics.json")).unwrap(),
        fs::read(full.join("metrics.json")).unwrap()
    );
    let rows: Value = serde_json::from_slice(&fs::read(abl.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["variant"], "full");
}

#[test]
fn eval_reports_baselines_and_rollout_modes() {
    let su = suite();
    let train = su.root.join("train");
    let mut args = vec!["train", "--data", s(&su.data), "--config", s(&su.config), "--max-epochs", "2"];
    args.extend(["--variant", "no-gru", "--out", s(&train)]);
    ok(&args);
    let ck = train.join("checkpoint.json");

    let eval = su.root.join("eval");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&su.data), "--baselines", "--human", "--out", s(&eval)]);
    let m: Value = serde_json::from_slice(&fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["split"], "test");
    assert_eq!(m["model"]["n_scenes"], 2);
    assert_eq!(m["baselines"].as_array().unwrap().len(), 4);
    assert!(m["human_pds"].as_f64().unwrap() > 0.0);

    let scene = m["model"]["scenes"][0]["scene_id"].as_str().unwrap().to_string();
    let free = su.root.join("free");
    ok(&["rollout", "--checkpoint", s(&ck), "--data", s(&su.data), "--scene", &scene, "--out", s(&free)]);
    let r: Value = serde_json::from_slice(&fs::read(free.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(r["mode"], "free");
    assert_eq!(r["points"].as_array().unwrap().len(), 6);

    let tf = su.root.join("tf");
    let base = ["rollout", "--checkpoint", s(&ck), "--data", s(&su.data), "--scene", &scene, "--mode", "teacher-forced"];
    let mut args = base.to_vec();
    args.extend(["--out", s(&tf)]);
    assert_eq!(code(&eyear(&args)), 2, "teacher forcing needs a subject");
    args.extend(["--subject", "99"]);
    assert_eq!(code(&eyear(&args)), 2);
    let mut args = base.to_vec();
    args.extend(["--subject", "1", "--out", s(&tf)]);
    ok(&args);
    let r: Value = serde_json::from_slice(&fs::read(tf.join("rollout.json")).unwrap()).unwrap();
    assert_eq!(r["mode"], "teacher-forced");

    let unknown = eyear(&["rollout", "--checkpoint", s(&ck), "--data", s(&su.data), "--scene", "nope", "--out", s(&tf)]);
    assert_eq!(code(&unknown), 2);

    let an = su.root.join("an");
    let bundle = su.data.parent().unwrap().join(format!("{scene}.json"));
    ok(&["analyze", s(&free.join("rollout.json")), s(&bundle), "--out", s(&an)]);
    let csv = fs::read_to_string(an.join("saccades.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("angle_bin_deg,length_bin_px,mean_speed_px_s,count"));
    assert_eq!(lines.count(), 8 * 6 + 1);
}
