use std::path::Path;
use std::process::{Command, Output};

use fusionnet::train::{decode_checkpoint, EpochRecord};
use serde_json::Value;

fn fusionnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionnet"))
        .args(args)
        .env("FUSIONNET_THREADS", "0")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const OUTPUTS: [&str; 7] =
    ["config.json", "split.json", "history.json", "initial.ckpt", "last.ckpt", "best.ckpt", "metrics.json"];

fn train_args(out: &str) -> Vec<&str> {
    vec!["train", "--synth", "6x32", "--epochs", "2", "--warmup", "1", "--batch", "4", "--seed", "9", "--out", out]
}

#[test]
fn train_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let eval = ["eval", "--config", &format!("{out}/config.json"), "--checkpoint", &format!("{out}/last.ckpt"), "--split", "train", "--out", out, "--format", "json"];

    let run = || {
        let t = fusionnet(&train_args(out));
        assert_eq!(code(&t), 0, "{}", stderr(&t));
        let e = fusionnet(&eval);
        assert_eq!(code(&e), 0, "{}", stderr(&e));
        let files: Vec<Vec<u8>> = OUTPUTS.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
        (files, stdout(&t), stdout(&e))
    };
    let first = run();
    let second = run();
    for (name, (a, b)) in OUTPUTS.iter().zip(first.0.iter().zip(&second.0)) {
        assert!(a == b, "{name} differs between identical runs");
    }
    assert_eq!(first.1, second.1);
    assert_eq!(first.2, second.2);

    // eval on the training split reproduces the history's last train accuracy
    let history: Vec<EpochRecord> = serde_json::from_slice(&first.0[2]).unwrap();
    assert_eq!(history.len(), 2);
    let report: Value = serde_json::from_str(&first.2).unwrap();
    let acc = report[0]["accuracy"].as_f64().unwrap();
    assert!((acc - history[1].train_accuracy.unwrap()).abs() <= 1e-3, "{acc} vs {:?}", history[1]);

    let config = read_json(&dir.path().join("config.json"));
    assert_eq!(config["command"], "eval");
    assert_eq!(config["seed"], 9);
    assert_eq!(config["synth"], "6x32");
    assert_eq!(config["resolution"], 32);
    assert_eq!(config["training"]["epochs"], 2);
    assert_eq!(config["training"]["batch_size"], 4);

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("Model,Accuracy,Kappa,Sensitivity,Specificity,PPV,TP,FP,TN,FN\nfusion,"));

    let best = decode_checkpoint(&first.0[5]).unwrap();
    let last = decode_checkpoint(&first.0[4]).unwrap();
    assert_eq!(last.epoch, 2);
    assert_eq!(last.history, history);
    assert!(best.epoch >= 1 && best.history.len() == best.epoch);
}

#[test]
fn seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = train_args(a.path().to_str().unwrap());
    assert_eq!(code(&fusionnet(&args)), 0);
    let out_b = b.path().to_str().unwrap();
    let last = args.len() - 1;
    args[last] = out_b;
    args[10] = "10";
    assert_eq!(code(&fusionnet(&args)), 0);
    let ha = std::fs::read(a.path().join("history.json")).unwrap();
    let hb = std::fs::read(b.path().join("history.json")).unwrap();
    assert_ne!(ha, hb);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = fusionnet(&["train", "--synth", "4x32", "--epochs", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&dir.path().join("history.json")), Value::Array(vec![]));
    assert!(dir.path().join("initial.ckpt").is_file());
    assert!(!dir.path().join("last.ckpt").exists());
    assert!(!dir.path().join("best.ckpt").exists());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": "resnet", "synth": "4x32", "seed": 3, "training": {"epochs": 1, "warmup_epochs": 0, "batch_size": 2}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = fusionnet(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = read_json(&out_dir.join("config.json"));
    assert_eq!(resolved["model"], "resnet");
    assert_eq!(resolved["seed"], 4);
    assert_eq!(resolved["training"]["seed"], 4);
    assert_eq!(resolved["training"]["epochs"], 1);
    assert_eq!(resolved["training"]["batch_size"], 2);
    assert_eq!(resolved["training"]["base_lr"], 5e-5);

    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = fusionnet(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochz"));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-root");
    let out = fusionnet(&["train", "--data", missing.to_str().unwrap(), "--epochs", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no-such-root"), "{}", stderr(&out));

    let ck_dir = dir.path().join("ck");
    assert_eq!(code(&fusionnet(&["train", "--synth", "2x32", "--epochs", "0", "--out", ck_dir.to_str().unwrap()])), 0);
    let ckpt = ck_dir.join("initial.ckpt");
    let empty = dir.path().join("empty");
    for class in ["NORMAL", "PNEUMONIA"] {
        std::fs::create_dir_all(empty.join("test").join(class)).unwrap();
    }
    let out = fusionnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", empty.to_str().unwrap(), "--resolution", "32"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = fusionnet(&["train", "--synth", "4x36", "--epochs", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("divisible"), "{}", stderr(&out));
}

/// Rewrites a checkpoint's manifest so one array no longer fits the model.
fn tamper(bytes: &[u8]) -> Vec<u8> {
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut manifest: Value = serde_json::from_slice(&bytes[20..20 + mlen]).unwrap();
    manifest["model"]["resnet"]["stem_channels"] = Value::from(12);
    let json = serde_json::to_vec(&manifest).unwrap();
    let mut out = bytes[..12].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[20 + mlen..]);
    out
}

#[test]
fn eval_shape_mismatch_names_the_array() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&fusionnet(&["train", "--synth", "2x32", "--epochs", "0", "--out", out])), 0);
    let bytes = std::fs::read(dir.path().join("initial.ckpt")).unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, tamper(&bytes)).unwrap();
    let res = fusionnet(&["eval", "--checkpoint", bad.to_str().unwrap(), "--synth", "2x32"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("resnet.stem"), "{}", stderr(&res));
}

#[test]
fn synth_layout_trains_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = fusionnet(&["synth", "--synth", "4x32", "--seed", "2", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("run");
    let out = fusionnet(&[
        "train", "--data", data.to_str().unwrap(), "--resolution", "32", "--model", "maxvit", "--epochs", "1",
        "--warmup", "0", "--batch", "4", "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&run.join("skip_report.json"))["skipped"], Value::Array(vec![]));
    let ckpt = run.join("best.ckpt");
    let out = fusionnet(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--resolution", "32", "--format", "csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = stdout(&out);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "maxvit");
    let total: u64 = row[6..10].iter().map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(total, 2);
}

#[test]
fn reproduce_table_passes_and_prints_matrices() {
    let out = fusionnet(&["reproduce-table"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cm in ["tp=390, fp=32, tn=202, fn=0", "tp=389, fp=36, tn=198, fn=1", "tp=388, fp=35, tn=199, fn=2", "tp=389, fp=33, tn=201, fn=1"] {
        assert!(text.contains(cm), "missing {cm}");
    }
    assert_eq!(text.matches("PASS").count(), 4);

    let strict = fusionnet(&["reproduce-table", "--tolerance", "0"]);
    assert_eq!(code(&strict), 1);
    assert!(stdout(&strict).contains("FAIL"));

    let a = fusionnet(&["reproduce-table", "--format", "json"]);
    let b = fusionnet(&["reproduce-table", "--format", "json"]);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["pass"], true);

    assert_eq!(code(&fusionnet(&["reproduce-table", "--tolerance", "-1"])), 2);
    assert_eq!(code(&fusionnet(&["reproduce-table", "--format", "xml"])), 2);
}

#[test]
fn gradcheck_filters_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["gradcheck", "--ops", "conv2d,softmax", "--format", "json", "--seed", "3", "--out", out];
    let a = fusionnet(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let first = std::fs::read(dir.path().join("gradcheck.json")).unwrap();
    let b = fusionnet(&args);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(first, std::fs::read(dir.path().join("gradcheck.json")).unwrap());
    let reports: Value = serde_json::from_slice(&a.stdout).unwrap();
    let ops: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["op"].as_str().unwrap()).collect();
    assert_eq!(ops, ["conv2d", "softmax"]);
    assert!(reports.as_array().unwrap().iter().all(|r| r["passed"] == true && r["instances"].as_u64() >= Some(10)));

    let bad = fusionnet(&["gradcheck", "--ops", "conv3d"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("conv3d"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&fusionnet(&[])), 2);
    assert_eq!(code(&fusionnet(&["fly"])), 2);
    assert_eq!(code(&fusionnet(&["train", "--bogus"])), 2);
    assert_eq!(code(&fusionnet(&["train", "--model", "vgg", "--synth", "2x32", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&fusionnet(&["train", "--synth", "2by32", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&fusionnet(&["eval", "--checkpoint", "x.ckpt", "--synth", "2x32", "--split", "dev"])), 2);
    assert_eq!(code(&fusionnet(&["train", "--synth", "2x32", "--epochs", "0"])), 2);
    let help = fusionnet(&["--help"]);
    assert_eq!(code(&help), 0);
    for cmd in ["train", "eval", "reproduce-table", "gradcheck", "synth"] {
        assert!(stdout(&help).contains(cmd));
    }
}
