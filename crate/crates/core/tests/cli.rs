use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ovmot::config::RunConfig;
use ovmot::metrics::MetricReport;
use ovmot::ssl::Checkpoint;
use serde_json::Value;

fn ovmot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovmot")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn scenario(name: &str) -> String {
    s(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json")))
}

fn generate(root: &Path) -> PathBuf {
    let bundle = root.join("bundle");
    let out = ovmot(&["generate", "--config", &scenario("easy"), "--out", &s(&bundle)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    bundle
}

fn train(bundle: &Path, out: &Path, extra: &[&str]) -> Output {
    let (bundle, out) = (s(bundle), s(out));
    let mut args = vec!["train", "--bundle", &bundle, "--out", &out];
    args.extend_from_slice(extra);
    ovmot(&args)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    for cmd in ["generate", "train", "track", "evaluate", "ablate"] {
        assert_eq!(code(&ovmot(&[cmd, "--help"])), 0, "{cmd} --help");
        assert_eq!(code(&ovmot(&[cmd, "--no-such-flag"])), 2, "{cmd} unknown flag");
    }
    assert_eq!(code(&ovmot(&["--help"])), 0);
    assert_eq!(code(&ovmot(&[])), 2);
}

#[test]
fn invalid_rate_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("easy")).unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, text.replace("\"miss_rate\": 0.0", "\"miss_rate\": 1.5")).unwrap();
    let out = ovmot(&["generate", "--config", &s(&cfg), "--out", &s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("miss"));
}

#[test]
fn missing_bundle_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir.path().join("nowhere"), &dir.path().join("t"), &[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_steps_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate(dir.path());

    let zero = dir.path().join("zero");
    assert_eq!(code(&train(&bundle, &zero, &["--steps", "0"])), 0);
    let ckpt = Checkpoint::load(&zero.join("checkpoint.json")).unwrap();
    let init = RunConfig::default()
        .resolved()
        .training
        .with_class_count(3)
        .initial_head(ckpt.cols)
        .unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.head().unwrap(), init);

    let first = dir.path().join("first");
    assert_eq!(code(&train(&bundle, &first, &["--steps", "15"])), 0);
    let ckpt = first.join("checkpoint.json");
    assert_eq!(Checkpoint::load(&ckpt).unwrap().step, 15);
    let second = dir.path().join("second");
    assert_eq!(code(&train(&bundle, &second, &["--steps", "10", "--resume", &s(&ckpt)])), 0);
    let resumed = Checkpoint::load(&second.join("checkpoint.json")).unwrap();
    assert_eq!(resumed.step, 25);
    let log = std::fs::read_to_string(second.join("train_log.csv")).unwrap();
    let first_step: usize = log.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert_eq!(first_step, 15);
}

#[test]
fn tracking_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate(dir.path());
    let t = dir.path().join("t");
    assert_eq!(code(&train(&bundle, &t, &["--steps", "10"])), 0);
    let ckpt = s(&t.join("checkpoint.json"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    for f in std::fs::read_dir(&bundle).unwrap() {
        let f = f.unwrap().path();
        std::fs::copy(&f, empty.join(f.file_name().unwrap())).unwrap();
    }
    std::fs::write(empty.join("detections.jsonl"), "").unwrap();
    let te = dir.path().join("te");
    let out = ovmot(&["track", "--bundle", &s(&empty), "--checkpoint", &ckpt, "--out", &s(&te)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(te.join("tracks.csv")).unwrap(),
        "frame,track_id,class_id,x,y,w,h,conf\n"
    );

    let cfg_text = std::fs::read_to_string(scenario("easy")).unwrap();
    let narrow = dir.path().join("narrow.json");
    std::fs::write(&narrow, cfg_text.replace("\"nuisance_dims\": 16", "\"nuisance_dims\": 12")).unwrap();
    let nb = dir.path().join("narrow");
    assert_eq!(code(&ovmot(&["generate", "--config", &s(&narrow), "--out", &s(&nb)])), 0);
    let out = ovmot(&["track", "--bundle", &s(&nb), "--checkpoint", &ckpt, "--out", &s(&dir.path().join("tn"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn evaluation_contract() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate(dir.path());
    let gt = s(&bundle.join("groundtruth.jsonl"));
    let vocab = s(&bundle.join("class_bank.json"));
    let eval = |tracks: &Path, out: &Path| {
        ovmot(&["evaluate", "--tracks", &s(tracks), "--ground-truth", &gt, "--vocab", &vocab, "--out", &s(out)])
    };

    let perfect = dir.path().join("perfect.csv");
    let mut csv = String::from("frame,track_id,class_id,x,y,w,h,conf\n");
    for line in std::fs::read_to_string(&gt).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let b = v["box"].as_array().unwrap();
        csv += &format!(
            "{},{},{},{},{},{},{},1.0\n",
            v["frame"], v["track"], v["class"], b[0], b[1], b[2], b[3]
        );
    }
    std::fs::write(&perfect, csv).unwrap();
    let out_dir = dir.path().join("ep");
    assert_eq!(code(&eval(&perfect, &out_dir)), 0);
    let all: MetricReport = serde_json::from_value(report(&out_dir)["all"].clone()).unwrap();
    assert_eq!((all.teta, all.loca, all.assoca, all.clsa), (1.0, 1.0, 1.0, 1.0));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "frame,track_id,class_id,x,y,w,h,conf\n").unwrap();
    let out_dir = dir.path().join("ee");
    assert_eq!(code(&eval(&empty, &out_dir)), 0);
    assert_eq!(report(&out_dir)["all"]["loca"], 0.0);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "frame,track_id,class_id,x,y,w,h,conf\n0,1,0,1,1,5,5,0.9\nbad,row\n1,1,0,1,1,5,5\n").unwrap();
    let out = eval(&bad, &dir.path().join("eb"));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("[3, 4]"));
}

#[test]
fn ablate_with_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{ "training": { "steps": 40 } }"#).unwrap();
    let variants = dir.path().join("variants.json");
    std::fs::write(
        &variants,
        r#"[{ "name": "full", "ssl": {} }, { "name": "untrained", "ssl": {}, "train": false }]"#,
    )
    .unwrap();
    let out_dir = dir.path().join("ab");
    let out = ovmot(&[
        "ablate",
        "--bundle",
        &s(&bundle),
        "--out",
        &s(&out_dir),
        "--config",
        &s(&cfg),
        "--variants",
        &s(&variants),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(out_dir.join("ablation.txt").exists());
    assert!(out_dir.join("ablate_config.json").exists());
}
