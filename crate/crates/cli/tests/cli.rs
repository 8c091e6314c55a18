use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cactuskit"))
        .args(args)
        .env("CACTUSKIT_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

const LINES: &[&str] = &[
    r#"{"image_id":"a","path":"a.jpg","width":100,"height":80,"annotations":[{"class":0,"box":[10,10,50,40]}],"split":"train"}"#,
    r#"{"image_id":"b","path":"b.jpg","width":100,"height":80,"annotations":[{"class":3,"box":[0,0,20,20.5]},{"class":5,"box":[30,30,99.5,80]}],"split":"val"}"#,
    r#"{"image_id":"c","path":"c.jpg","width":60,"height":60,"annotations":[{"class":4,"box":[5,5,55,55]}],"split":"test"}"#,
];

fn small_manifest(dir: &Path) -> PathBuf {
    let path = dir.join("m.jsonl");
    fs::write(&path, LINES.join("\n") + "\n").unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_status_tracks_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let clean = small_manifest(tmp.path());
    let o = run(&["validate", "--manifest", s(&clean)], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("violations.txt")).unwrap(), "");

    let broken = tmp.path().join("broken.jsonl");
    let text = format!(
        "{}\n{}\n{}\n",
        LINES[0],
        LINES[0],
        r#"{"image_id":"z","path":"z.jpg","width":10,"height":10,"annotations":[{"class":8,"box":[0,0,11,5]}]}"#
    );
    fs::write(&broken, text).unwrap();
    let o = run(&["validate", "--manifest", s(&broken)], &out);
    assert_eq!(o.status.code(), Some(1));
    let listing = stdout(&o);
    assert_eq!(listing.lines().count(), 3, "{listing}");
    assert!(listing.contains("duplicate-image-id"));
    assert!(listing.contains("unknown-class"));
    assert!(listing.contains("out-of-bounds"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    let cases: Vec<Vec<&str>> = vec![
        vec!["split", "--manifest", "does/not/exist.jsonl"],
        vec!["augment", "--manifest", s(&m), "--angles", "45"],
        vec!["split", "--manifest", s(&m), "--train", "0.9"],
        vec![
            "eval",
            "--manifest",
            s(&m),
            "--replay-ground-truth",
            "--iou",
            "0",
        ],
        vec!["bench", "--manifest", s(&m), "--backend", "replay"],
        vec!["report", "--format", "text"],
        vec!["no-such-subcommand"],
    ];
    for args in cases {
        let o = run(&args, &out);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "sead = 4\n").unwrap();
    let o = run(
        &["--config", s(&cfg), "validate", "--manifest", s(&m)],
        &out,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn undefined_metrics_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = tmp.path().join("empty.jsonl");
    fs::write(
        &m,
        r#"{"image_id":"x","path":"x.jpg","width":10,"height":10,"annotations":[],"class_tag":4}"#,
    )
    .unwrap();
    let o = run(
        &["eval", "--manifest", s(&m), "--replay-ground-truth"],
        &out,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("undefined"));
}

#[test]
fn config_file_feeds_the_stamp_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let m = small_manifest(tmp.path());
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 4\nout_dir = \"from-config\"\n[eval]\niou_threshold = 0.75\ninterpolation = \"101_point\"\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cactuskit"))
        .args([
            "--config",
            s(&cfg),
            "--seed",
            "9",
            "eval",
            "--manifest",
            s(&m),
            "--replay-ground-truth",
        ])
        .env_remove("CACTUSKIT_OUT_DIR")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("from-config");
    let stamp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval.stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 9);
    assert_eq!(stamp["config"]["eval"]["iou_threshold"], 0.75);
    assert_eq!(stamp["config"]["eval"]["interpolation"], "101_point");
    assert_eq!(stamp["tool"], "cactuskit");
    let outputs: Vec<&str> = stamp["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert_eq!(outputs, ["eval.csv", "eval.json", "eval.txt"]);
    assert!(out.join("eval.stamp.time").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["iou_threshold"], 0.75);
    assert_eq!(report["map50_95"], 1.0);
}

#[test]
fn convert_round_trip_restores_corner_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    let o = run(&["materialize", "--manifest", s(&m)], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let original = fs::read_to_string(out.join("dataset/labels/val/b.txt")).unwrap();
    assert_eq!(original, "3 0 0 20 20.500000\n5 30 30 99.500000 80\n");

    let to_norm = tmp.path().join("norm");
    let o = run(
        &[
            "convert",
            "--input",
            s(&out.join("dataset/labels/val")),
            "--from",
            "corner",
            "--to",
            "normalized",
            "--manifest",
            s(&m),
        ],
        &to_norm,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let back = tmp.path().join("back");
    let o = run(
        &[
            "convert",
            "--input",
            s(&to_norm.join("converted/b.txt")),
            "--from",
            "normalized",
            "--to",
            "corner",
            "--width",
            "100",
            "--height",
            "80",
        ],
        &back,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(back.join("converted/b.txt")).unwrap(),
        original
    );
}

#[test]
fn layout_check_reports_tampered_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    assert!(run(&["materialize", "--manifest", s(&m)], &out)
        .status
        .success());
    let root = out.join("dataset");
    let o = run(
        &["validate", "--manifest", s(&m), "--labels", s(&root)],
        &tmp.path().join("v1"),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    fs::remove_file(root.join("labels/test/c.txt")).unwrap();
    let o = run(
        &["validate", "--manifest", s(&m), "--labels", s(&root)],
        &tmp.path().join("v2"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("c: labels: label-mismatch"));
}

#[test]
fn trainlog_aliases_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let log = tmp.path().join("custom.csv");
    fs::write(
        &log,
        "step,bl,ol,cl,prec,rec,m50,m5095\n1,0.1,0.2,0.3,0.5,0.6,0.7,0.4\n2,0.05,0.1,0.1,0.6,0.5,0.8,0.45\n",
    )
    .unwrap();
    let aliases = tmp.path().join("aliases.txt");
    fs::write(
        &aliases,
        "step = epoch\nbl = box_loss\nol = obj_loss\ncl = cls_loss\nprec = precision\nrec = recall\nm50 = map50\nm5095 = map50_95\n",
    )
    .unwrap();
    let o = run(
        &[
            "trainlog",
            "export",
            "--log",
            s(&log),
            "--aliases",
            s(&aliases),
            "--fields",
            "epoch,map50",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "epoch,map50\n1,0.7\n2,0.8\n");
    let o = run(&["trainlog", "summarize", "--log", s(&log)], &out);
    assert_eq!(o.status.code(), Some(1), "unknown headers are a data error");
}

#[test]
fn report_merges_artifacts_into_recorded_entry() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    assert!(run(
        &["eval", "--manifest", s(&m), "--replay-ground-truth"],
        &out
    )
    .status
    .success());
    let o = run(
        &[
            "report",
            "--recorded",
            s(&fixture("model_comparison.toml")),
            "--name",
            "Faster R-CNN",
            "--eval",
            s(&out.join("eval.json")),
            "--format",
            "csv",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // recorded figures take precedence over the derived mAP of 1
    assert_eq!(
        stdout(&o),
        "backend,map50,loss,training_time_h,test_time_ms\nFaster R-CNN,0.7008,0.1581,1.5,19\nYOLOv5 (size s),0.9733,0.02042,50.9,26\n"
    );
    let o = run(
        &[
            "report",
            "--name",
            "replay",
            "--eval",
            s(&out.join("eval.json")),
        ],
        &out,
    );
    assert!(
        stdout(&o).contains("mAP@.5               1"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn bench_writes_latency_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    let o = run(
        &[
            "bench",
            "--manifest",
            s(&m),
            "--backend",
            "delay",
            "--delay-ms",
            "1",
            "--warmup",
            "2",
            "--repeats",
            "4",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let latency: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("latency.json")).unwrap()).unwrap();
    assert_eq!(latency["sample_count"], 12);
    assert_eq!(latency["warmup"], 2);
    let csv = fs::read_to_string(out.join("latency_samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[cfg(unix)]
#[test]
fn external_backend_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let m = small_manifest(tmp.path());
    let script = tmp.path().join("detector.sh");
    fs::write(
        &script,
        "sed -n 's/.*\"image_id\":\"\\([^\"]*\\)\".*/\\1 4 0.9 1 1 30 30/p' \"$1\"\n",
    )
    .unwrap();
    let o = run(
        &[
            "predict",
            "--manifest",
            s(&m),
            "--backend",
            "external",
            "--program",
            "sh",
            "--program-arg",
            s(&script),
        ],
        &out,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = fs::read_to_string(out.join("predictions.txt")).unwrap();
    assert_eq!(preds.lines().count(), 3, "{preds}");
    assert!(
        preds.lines().all(|l| l.contains(" 4 0.9 1 1 30 30")),
        "{preds}"
    );
}
