use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridcast::cli::{main_with, RunManifest, RASTER_FILE, RUN_MANIFEST};
use gridcast::models::CHECKPOINT_TENSORS;
use gridcast::pipeline::Dataset;
use gridcast::report::{EvalReport, REPORT_FILE};
use gridcast::synth::{TruthSpec, SENSORS_FILE, TRUTH_DIR};

fn gridcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcast"))
        .args(args)
        .env("GRIDCAST_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

/// Simulated tiny city rasterized into `<root>/bundle`.
fn tiny_bundle(root: &Path, hours: usize) -> PathBuf {
    let world = root.join("world");
    let h = hours.to_string();
    ok(gridcast(&["simulate", "--preset", "tiny", "--hours", &h, "--seed", "4", "--out", p(&world)]));
    let bundle = root.join("bundle");
    ok(gridcast(&[
        "rasterize",
        p(&world.join(SENSORS_FILE)),
        p(&world.join(RASTER_FILE)),
        "--out",
        p(&bundle),
    ]));
    bundle
}

#[test]
fn default_simulation_has_39_stations_and_19_channels() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    ok(gridcast(&["simulate", "--hours", "30", "--out", p(&world)]));
    let spec: TruthSpec =
        serde_json::from_str(&std::fs::read_to_string(world.join(TRUTH_DIR).join("spec.json")).unwrap()).unwrap();
    let pollution = spec
        .stations
        .iter()
        .filter(|s| s.kind == gridcast::pipeline::SensorKind::Pollution)
        .count();
    assert_eq!(pollution, 39);
    assert_eq!((spec.rows, spec.cols), (32, 32));
    let bundle = dir.path().join("bundle");
    let out = ok(gridcast(&[
        "rasterize",
        p(&world.join(SENSORS_FILE)),
        p(&world.join(RASTER_FILE)),
        "--out",
        p(&bundle),
    ]));
    assert!(stderr(&out).contains("0 outside the bounding box"), "{}", stderr(&out));
    let data = Dataset::load(&bundle).unwrap();
    assert_eq!(data.channels(), 1 + 5 + 8 + 2 + 3);
    assert!(RunManifest::load(&bundle).is_ok());
}

#[test]
fn same_seed_gives_identical_artifact_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(gridcast(&["simulate", "--preset", "tiny", "--seed", seed, "--out", p(&out)]));
        RunManifest::load(&out).unwrap()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert!(!a.artifacts.is_empty());
    assert_eq!(a.artifacts, b.artifacts);
    assert_eq!(a.config_hash, b.config_hash);
    assert_ne!(a.artifacts, c.artifacts);
    assert_eq!(a.seed, Some(7));
    assert!(a.artifacts.iter().all(|f| f.path != RUN_MANIFEST));
}

#[test]
fn zero_hours_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridcast(&["simulate", "--preset", "tiny", "--hours", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn empty_csv_reports_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    ok(gridcast(&["simulate", "--preset", "tiny", "--hours", "2", "--out", p(&world)]));
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "station_id,kind,lat,lon,timestamp,key,value\n").unwrap();
    for csv in [empty, dir.path().join("zero.csv")] {
        if !csv.exists() {
            std::fs::write(&csv, "").unwrap();
        }
        let o = gridcast(&["rasterize", p(&csv), p(&world.join(RASTER_FILE)), "--out", p(&dir.path().join("b"))]);
        assert_ne!(o.status.code(), Some(0));
        assert!(stderr(&o).contains("no records"), "{}", stderr(&o));
    }
}

#[test]
fn records_outside_the_box_are_counted_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    ok(gridcast(&["simulate", "--preset", "tiny", "--hours", "6", "--out", p(&world)]));
    let csv = world.join(SENSORS_FILE);
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("stray,pollution,10.000000,10.000000,2015-01-01T00:00:00Z,PM25,55.0\n");
    std::fs::write(&csv, text).unwrap();
    let o = ok(gridcast(&[
        "rasterize",
        p(&csv),
        p(&world.join(RASTER_FILE)),
        "--out",
        p(&dir.path().join("b")),
    ]));
    assert!(stderr(&o).contains("1 outside the bounding box"), "{}", stderr(&o));
}

#[test]
fn missing_bundle_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let code = main_with([
        "gridcast",
        "train",
        p(&dir.path().join("nope")),
        "--out",
        p(&dir.path().join("ck")),
    ]);
    assert_eq!(code, 2);
    assert_eq!(main_with(["gridcast", "train"]), 2);
    assert_eq!(main_with(["gridcast", "frobnicate"]), 2);
}

#[test]
fn interpolation_train_evaluate_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path(), 48);
    let ck = dir.path().join("ck");
    ok(gridcast(&[
        "train", p(&bundle), "--arch", "convlstm", "--k", "1", "--scale", "desk", "--steps", "3", "--batch-size", "4",
        "--out", p(&ck),
    ]));
    assert!(ck.join(CHECKPOINT_TENSORS).exists());
    let loss = std::fs::read_to_string(ck.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n"));
    assert_eq!(loss.lines().count(), 4);
    let ev = dir.path().join("eval");
    ok(gridcast(&["evaluate", p(&ck), p(&bundle), "--out", p(&ev)]));
    let report = EvalReport::load(&ev.join(REPORT_FILE)).unwrap();
    assert_eq!(report.k, 1);
    assert!(report.rmse >= 0.0);
    assert!(report.sp_rmse.is_some());
    assert!(!report.variance_series.is_empty());
    let pgm = std::fs::read(ev.join("heatmaps").join("pred_step01.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);

    let hm = dir.path().join("observed");
    ok(gridcast(&["export-heatmap", p(&bundle), "--index", "3", "--out", p(&hm)]));
    assert!(hm.join("observed_00003.csv").exists());
    assert!(RunManifest::load(&hm).is_ok());
}

#[test]
fn forecast_report_has_twelve_step_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path(), 96);
    let ck = dir.path().join("ck");
    ok(gridcast(&[
        "train", p(&bundle), "--arch", "convlstm", "--k", "12", "--scale", "desk", "--steps", "2", "--batch-size", "2",
        "--out", p(&ck),
    ]));
    let ev = dir.path().join("eval");
    ok(gridcast(&["evaluate", p(&ck), p(&bundle), "--out", p(&ev)]));
    let report = EvalReport::load(&ev.join(REPORT_FILE)).unwrap();
    assert_eq!(report.k, 12);
    assert_eq!(report.per_step_rmse.len(), 12);
    assert!(report.sp_rmse.is_none());
    assert!(report.variance_series.is_empty());
}

#[test]
fn fc_lstm_baseline_trains_three_stacked_cells() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path(), 48);
    let ck = dir.path().join("ck");
    ok(gridcast(&[
        "train", p(&bundle), "--arch", "fc_lstm", "--scale", "desk", "--hidden", "16", "--steps", "2", "--out", p(&ck),
    ]));
    let (model, step) = gridcast::models::Model::<f32>::load(&ck).unwrap();
    assert_eq!(step, 2);
    assert_eq!(model.config.encoder_layers, 3);
}

#[test]
fn corrupted_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path(), 48);
    let ck = dir.path().join("ck");
    ok(gridcast(&["train", p(&bundle), "--scale", "desk", "--steps", "1", "--out", p(&ck)]));
    let t = ck.join(CHECKPOINT_TENSORS);
    let mut bytes = std::fs::read(&t).unwrap();
    bytes[..4].copy_from_slice(b"JUNK");
    std::fs::write(&t, bytes).unwrap();
    let o = gridcast(&["evaluate", p(&ck), p(&bundle), "--out", p(&dir.path().join("ev"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("integrity"), "{}", stderr(&o));
}

#[test]
fn unknown_experiment_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let o = gridcast(&["experiment", "interp_nothing", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["interp_base", "forecast_all", "baseline_fc_lstm", "all-interp", "factors-forecast"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn experiment_on_a_bundle_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = tiny_bundle(dir.path(), 48);
    let out = dir.path().join("exp");
    ok(gridcast(&[
        "experiment", "interp_met", "--data", p(&bundle), "--scale", "desk", "--steps", "2", "--out", p(&out),
    ]));
    let report = EvalReport::load(&out.join("interp_met.json")).unwrap();
    assert_eq!(report.experiment.as_deref(), Some("interp_met"));
    assert_eq!(report.channels.len(), 1 + 5 + 8);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}
