use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = pfm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(dir: &Path, seed: &str) {
    ok_json(&[
        "synth",
        "--seed",
        seed,
        "--out-dir",
        s(dir),
        "--subjects",
        "60",
        "--set",
        "length_minutes=96",
    ]);
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_same_seed_writes_identical_files() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    small_synth(&a, "7");
    small_synth(&b, "7");
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert!(!ca.is_empty());
    assert_eq!(ca, cb);
    let c = t.path().join("c");
    small_synth(&c, "8");
    assert_ne!(ca, dir_contents(&c));
}

#[test]
fn pipeline_end_to_end() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    small_synth(&ds, "3");
    let enc = t.path().join("enc.ckpt");
    let loss = t.path().join("loss.csv");
    let pre = ok_json(&[
        "pretrain",
        "--data",
        s(&ds),
        "--checkpoint",
        s(&enc),
        "--loss-csv",
        s(&loss),
        "--epochs",
        "2",
        "--set",
        "d_model=16",
        "--set",
        "heads=2",
        "--set",
        "visible_layers=1",
        "--set",
        "masked_layers=1",
    ]);
    assert_eq!(pre["details"]["history"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(&loss).unwrap().lines().count(), 3);

    let model = t.path().join("model.ckpt");
    let th = ok_json(&[
        "train-head",
        "--data",
        s(&ds),
        "--checkpoint",
        s(&enc),
        "--model",
        s(&model),
        "--set",
        "head_epochs=10",
    ]);
    assert_eq!(th["schema_version"], 1);
    assert!(th["metrics"]["auroc"]["point"].is_f64());

    let report_path = t.path().join("eval.json");
    let out = pfm(&[
        "evaluate",
        "--data",
        s(&ds),
        "--model",
        s(&model),
        "--out",
        s(&report_path),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let ev: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(ev["run_tag"], "evaluate");
    for k in ["auroc", "accuracy", "recall", "specificity", "f1", "precision", "auprc"] {
        assert!(ev["metrics"][k]["point"].is_f64(), "{k}");
    }
    // evaluation of the saved model reproduces the score from training
    assert_eq!(ev["metrics"]["auroc"], th["metrics"]["auroc"]);

    let boot = ok_json(&["evaluate", "--data", s(&ds), "--model", s(&model), "--bootstrap", "30"]);
    let a = &boot["metrics"]["auroc"];
    assert!(a["lo"].as_f64().unwrap() <= a["point"].as_f64().unwrap());
    assert!(a["point"].as_f64().unwrap() <= a["hi"].as_f64().unwrap());

    let ex_dir = t.path().join("explain");
    let ex = ok_json(&["explain", "--data", s(&ds), "--model", s(&model), "--out-dir", s(&ex_dir)]);
    assert!(["age", "gender", "bmi"].contains(&ex["details"]["top_demographic"].as_str().unwrap()));
    for f in ["attention_means.csv", "attention_matrix.csv", "bmi_attention.csv"] {
        assert!(ex_dir.join(f).exists(), "{f}");
    }

    let table = t.path().join("ablation.csv");
    let ab = ok_json(&[
        "ablate",
        "--data",
        s(&ds),
        "--checkpoint",
        s(&enc),
        "--runs",
        "2",
        "--table",
        s(&table),
        "--set",
        "head_epochs=5",
    ]);
    assert_eq!(ab["n_runs"], 2);
    assert_eq!(ab["seed_list"], serde_json::json!([0, 1]));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 4);

    let ds2 = t.path().join("ds2");
    small_synth(&ds2, "4");
    let cd = ok_json(&[
        "cross-domain",
        "--source",
        s(&ds),
        "--target",
        s(&ds2),
        "--checkpoint",
        s(&enc),
        "--runs",
        "1",
        "--set",
        "head_epochs=5",
    ]);
    assert_eq!(cd["run_tag"], "synthetic->synthetic");

    let mismatch = pfm(&[
        "cross-domain",
        "--source",
        s(&ds),
        "--target",
        s(&ds2),
        "--checkpoint",
        s(&enc),
        "--set",
        "sigma=6",
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    let msg = error_json(&mismatch)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("sigma = 12") && msg.contains("sigma = 6"), "{msg}");

    let no_head = pfm(&["evaluate", "--data", s(&ds), "--model", s(&enc)]);
    assert_eq!(no_head.status.code(), Some(2));

    let bytes = fs::read(&model).unwrap();
    let trunc = t.path().join("trunc.ckpt");
    fs::write(&trunc, &bytes[..bytes.len() - 8]).unwrap();
    let bad = pfm(&["evaluate", "--data", s(&ds), "--model", s(&trunc)]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(error_json(&bad)["error"]["category"], "checkpoint_payload");
}

#[test]
fn config_file_and_flag_precedence() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    let ds = t.path().join("ds");
    fs::write(
        &cfg,
        format!("# small cohort\nsubjects = 40\nlength_minutes = 48\nout_dir = {}\n", s(&ds)),
    )
    .unwrap();
    let r = ok_json(&["synth", "--config", s(&cfg), "--subjects", "30"]);
    assert_eq!(r["details"]["subjects"], 30);
    assert_eq!(r["config_echo"]["length_minutes"], "48");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("absent");
    let cases: Vec<Vec<String>> = vec![
        vec!["evaluate".into(), "--data".into(), s(&missing).into(), "--model".into(), "m".into()],
        vec!["gradcheck".into(), "--set".into(), "bogus=1".into()],
        vec!["gradcheck".into(), "--set".into(), "novalue".into()],
        vec!["synth".into(), "--subjects".into(), "10".into(), "--set".into(), "subjects=12".into()],
        vec!["synth".into(), "--seed".into(), "1".into()],
        vec!["pretrain".into(), "--no-such-flag".into()],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = pfm(&refs);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let dup = t.path().join("dup.cfg");
    fs::write(&dup, "seed = 1\nseed = 2\n").unwrap();
    let out = pfm(&["gradcheck", "--config", s(&dup)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["category"], "config");
}

#[test]
fn gradcheck_reports_every_module() {
    let r = ok_json(&["gradcheck", "--seed", "5"]);
    assert_eq!(r["details"]["all_passed"], true);
    assert_eq!(r["details"]["modules"].as_array().unwrap().len(), 7);
}
