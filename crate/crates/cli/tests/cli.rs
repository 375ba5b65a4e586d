use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use warmbo::metafeature::{TrainConfig, WingParams, WingShape};

fn warmbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warmbo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = warmbo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_collection(dir: &Path) -> String {
    let out = dir.join("coll");
    ok(&["make-collection", "--out", p(&out), "--families", "2", "--fractions", "0.5,1.0", "--instances-per-task", "40"]);
    out.join("store.json").to_str().unwrap().to_string()
}

#[test]
fn version_flag_prints_semver() {
    let out = ok(&["--version"]);
    assert_eq!(out.trim(), format!("warmbo {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn make_collection_reports_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["make-collection", "--out", p(&dir.path().join("c")), "--families", "2", "--fractions", "0.5,1.0"]);
    assert!(out.contains("K = 4 records"), "{out}");
    for f in ["store.json", "heldout.json", "manifest.json"] {
        assert!(dir.path().join("c").join(f).is_file(), "{f} missing");
    }
}

#[test]
fn unwritable_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = warmbo(&["make-collection", "--out", p(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn k_not_below_budget_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let out = warmbo(&["run", "--store", &store, "--k", "10", "--T", "10", "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_store_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = warmbo(&["run", "--store", p(&dir.path().join("absent.json")), "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(warmbo(&["sample", "--bogus"]).status.code(), Some(2));
}

#[test]
fn halton_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&["run", "--store", &store, "--init", "halton", "--k", "3", "--T", "6", "--seed", "4", "--out", p(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn warmstart_trace_tags_initial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let wing = dir.path().join("wing");
    ok(&["train-metric", "--store", &store, "--out", p(&wing), "--iterations", "5", "--tau", "20"]);
    let trace = dir.path().join("trace.csv");
    ok(&[
        "run", "--store", &store, "--init", "warmstart", "--k", "3", "--T", "10",
        "--wing", p(&wing.join("wing.json")), "--out", p(&trace),
    ]);
    let text = fs::read_to_string(&trace).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        let phase = row.rsplit(',').next().unwrap();
        assert_eq!(phase, if i < 3 { "init" } else { "bo" }, "row {i}");
        assert!(row.contains(",warmstart,"));
    }
    assert!(dir.path().join("trace.csv.manifest.json").is_file());
}

#[test]
fn zero_step_training_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let out = dir.path().join("wing");
    ok(&["train-metric", "--store", &store, "--out", p(&out), "--iterations", "1", "--step-size", "0", "--seed", "7"]);
    let trained = WingParams::load(&out.join("wing.json")).unwrap();
    let cfg = TrainConfig::default();
    let shape = WingShape {
        instance_dim: 16,
        num_classes: trained.num_classes(),
        extractor: cfg.extractor,
        head: cfg.head,
        meta_dim: cfg.meta_dim,
    };
    assert_eq!(trained, WingParams::init(&shape, 7).unwrap());
}

#[test]
fn too_few_records_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let coll = dir.path().join("one");
    ok(&["make-collection", "--out", p(&coll), "--families", "1", "--fractions", "1.0"]);
    let out = warmbo(&["train-metric", "--store", p(&coll.join("store.json")), "--out", p(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ccov_values_lie_in_half_interval() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let text = ok(&["ccov", "--store", &store]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("record_id,dim_name,subtracted_ccov,warning"));
    let mut n = 0;
    for line in lines {
        let v: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((-0.5..=0.5).contains(&v), "{line}");
        n += 1;
    }
    assert_eq!(n, 4 * 6);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sample.cfg");
    fs::write(&cfg, "# design\nmethod = halton\nd = 2\nk = 2\n").unwrap();
    let text = ok(&["sample", "--config", p(&cfg), "--k", "3"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["u1,u2", "0.5,0.3333333333333333", "0.25,0.6666666666666666", "0.75,0.1111111111111111"]);
}

#[test]
fn manifest_replays_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let first = dir.path().join("first.csv");
    ok(&["run", "--store", &store, "--init", "latin", "--acq", "ucb", "--T", "6", "--seed", "2", "--out", p(&first)]);
    let manifest = dir.path().join("first.csv.manifest.json");
    let again = dir.path().join("again.csv");
    ok(&["run", "--config", p(&manifest), "--out", p(&again)]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn compare_writes_streamed_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let out = dir.path().join("cmp");
    ok(&[
        "compare", "--store", &store, "--out", p(&out), "--methods", "uniform,halton", "--acqs", "ei",
        "--T", "5", "--seeds", "2", "--jobs", "3",
    ]);
    let rows = fs::read_to_string(out.join("comparison.csv")).unwrap();
    // 2 tasks x 2 methods x 1 acquisition x 2 seeds x 5 iterations
    assert_eq!(rows.lines().count(), 1 + 40);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 5);
}

#[test]
fn warmstart_compare_needs_a_wing() {
    let dir = tempfile::tempdir().unwrap();
    let store = small_collection(dir.path());
    let out = warmbo(&["compare", "--store", &store, "--out", p(&dir.path().join("cmp"))]);
    assert_eq!(out.status.code(), Some(2));
}
