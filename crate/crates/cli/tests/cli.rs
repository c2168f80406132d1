use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use laneatt::anchors::generate_anchors;
use laneatt::config::RunConfig;
use laneatt::data::parse_tusimple_labels;
use laneatt::model::LaneAtt;
use tempfile::TempDir;

fn laneatt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laneatt"))
        .args(args)
        .current_dir(dir)
        .env_remove("LANEATT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = laneatt(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
        .parse()
        .unwrap()
}

#[test]
fn scoring_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "gt", "--count", "6"]);
    let tu = ok(d, &["score", "--pred", "gt", "--gt", "gt"]);
    assert_eq!(value(&tu, "f1"), 1.0);
    assert_eq!(value(&tu, "accuracy"), 1.0);
    let cu = ok(d, &["score", "--pred", "gt", "--gt", "gt", "--format", "culane"]);
    assert_eq!(value(&cu, "f1"), 1.0);
    assert_eq!(value(&cu, "fp"), 0.0);
    let csv = ok(d, &["score", "--pred", "gt/label.json", "--gt", "gt", "--csv"]);
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "tr", "--count", "2"]);
    ok(d, &["train", "--data", "tr", "--out", "m.ckpt", "--epochs", "0", "--set", "model.n_anchors=none", "--seed", "7"]);

    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    let anchors = generate_anchors(&cfg.anchors, cfg.model.lane_grid()).unwrap();
    let model = LaneAtt::new(cfg.model.clone(), anchors, 7).unwrap();
    model.save(d.join("expected.ckpt")).unwrap();
    assert_eq!(fs::read(d.join("m.ckpt")).unwrap(), fs::read(d.join("expected.ckpt")).unwrap());
    assert!(d.join("m.ckpt.cfg").exists());
}

#[test]
fn bench_macs_grow_with_anchor_count() {
    let tmp = TempDir::new().unwrap();
    let out = ok(
        tmp.path(),
        &["bench", "--anchors", "250,500,1000", "--sizes", "32x64", "--reps", "10", "--warmup", "3"],
    );
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("height,width,n_anchors,macs,fps,fps_spread"));
    let macs: Vec<u64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(macs.len(), 3);
    assert!(macs.windows(2).all(|w| w[0] <= w[1]), "{macs:?}");
}

#[test]
fn same_seed_reproduces_outputs_bit_for_bit() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let train = |data: &str, ckpt: &str| {
        ok(d, &["train", "--data", data, "--out", ckpt, "--epochs", "1", "--set", "model.n_anchors=100", "--seed", "3"]);
    };
    ok(d, &["gen-data", "--out", "a", "--count", "4", "--seed", "3"]);
    ok(d, &["gen-data", "--out", "b", "--count", "4", "--seed", "3"]);
    assert_eq!(fs::read(d.join("a/label.json")).unwrap(), fs::read(d.join("b/label.json")).unwrap());
    let img = "images/synth_3_000002.ppm";
    assert_eq!(fs::read(d.join("a").join(img)).unwrap(), fs::read(d.join("b").join(img)).unwrap());

    train("a", "a.ckpt");
    train("b", "b.ckpt");
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());

    ok(d, &["infer", "--checkpoint", "a.ckpt", "--data", "a", "--out", "pa.json"]);
    ok(d, &["infer", "--checkpoint", "b.ckpt", "--data", "a", "--out", "pb.json"]);
    assert_eq!(fs::read(d.join("pa.json")).unwrap(), fs::read(d.join("pb.json")).unwrap());
}

#[test]
fn seed_flag_beats_environment() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let run = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_laneatt"));
        cmd.args(["gen-data", "--out", out, "--count", "1"]).current_dir(d).env_remove("LANEATT_SEED");
        if let Some(e) = env {
            cmd.env("LANEATT_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run("env", Some("5"), None);
    run("both", Some("5"), Some("9"));
    assert!(d.join("env/images/synth_5_000000.ppm").exists());
    assert!(d.join("both/images/synth_9_000000.ppm").exists());
}

#[test]
fn inferred_labels_parse_back() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "v", "--count", "3"]);
    ok(d, &["train", "--data", "v", "--out", "m.ckpt", "--epochs", "1", "--set", "model.n_anchors=50"]);
    ok(d, &["infer", "--checkpoint", "m.ckpt", "--data", "v", "--out", "p.json", "--set", "nms.confidence_threshold=0"]);
    let grid = RunConfig::default().model.lane_grid();
    let labels = parse_tusimple_labels(&fs::read_to_string(d.join("p.json")).unwrap(), &grid).unwrap();
    assert_eq!(labels.len(), 3);
    ok(d, &["infer", "--checkpoint", "m.ckpt", "--data", "v", "--out", "pc", "--format", "culane"]);
    let report = ok(d, &["score", "--pred", "pc", "--gt", "v", "--format", "culane"]);
    assert!(value(&report, "f1").is_finite());
    ok(d, &["render", "--data", "v", "--out", "r", "--pred", "p.json"]);
    assert_eq!(fs::read_dir(d.join("r")).unwrap().count(), 3);
}

#[test]
fn config_errors_name_the_field_and_exit_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = laneatt(d, &["gen-data", "--out", "x", "--set", "train.learning_rate=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));

    fs::write(d.join("bad.cfg"), "model.input_width = 100\n").unwrap();
    let out = laneatt(d, &["gen-data", "--out", "x", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.input_size"));

    let out = laneatt(d, &["score", "--pred", "missing.json", "--gt", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}
