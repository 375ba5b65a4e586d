use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::Serialize;

use warmbo::acquisition::{AcquisitionConfig, AcquisitionKind};
use warmbo::bho::{run_bho, run_warm_bho, BhoError, Trace, WarmStart};
use warmbo::history::{ccov as ccov_at, HistoryError, HistoryStore};
use warmbo::hyperspace::{HyperparameterSpace, HyperparameterVector};
use warmbo::metafeature::{self, MetaFeatureError, MetaFeatureTable, TrainConfig, WingParams};
use warmbo::sampling::{self, SampleMethod};
use warmbo::synthbench::{
    self, baseline_init, compare_initializations, evaluate_task, load_tasks, realizable_store, save_tasks, write_cell_rows,
    write_summary, CollectionSpec, CompareConfig, InitMethod, RealizableSpec, SyntheticTask, COMPARISON_HEADER,
};

use crate::{CcovArgs, CompareArgs, Failure, MakeCollectionArgs, RunArgs, SampleArgs, TrainMetricArgs};

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn usage_err(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

/// Creates `dir` and checks that files can be written into it.
fn prepare_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display())).usage()?;
    let probe = dir.join(".warmbo-write-check");
    fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display())).usage()?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn prepare_file(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => prepare_dir(p),
        _ => prepare_dir(Path::new(".")),
    }
}

fn load_store(path: &Path) -> Result<HistoryStore, Failure> {
    if !path.is_file() {
        return Err(usage_err(format!("history store {} does not exist", path.display())));
    }
    HistoryStore::load(path).with_context(|| format!("loading {}", path.display())).usage()
}

fn load_task_file(store: &Path, tasks: Option<&Path>) -> Result<Vec<SyntheticTask>, Failure> {
    let path = match tasks {
        Some(p) => p.to_path_buf(),
        None => store.parent().unwrap_or(Path::new(".")).join("heldout.json"),
    };
    let tasks = load_tasks(&path).with_context(|| format!("loading tasks from {}", path.display())).usage()?;
    if tasks.is_empty() {
        return Err(usage_err(format!("{} holds no tasks", path.display())));
    }
    Ok(tasks)
}

/// Loads a trained wing and attaches its meta-features to `store`.
fn load_warm(wing: Option<&Path>, metafeatures: Option<&Path>, store: HistoryStore) -> Result<(WingParams, MetaFeatureTable, HistoryStore), Failure> {
    let wing_path = wing.ok_or_else(|| usage_err("warmstart needs --wing (the output of train-metric)"))?;
    let mf_path = match metafeatures {
        Some(p) => p.to_path_buf(),
        None => wing_path.parent().unwrap_or(Path::new(".")).join("metafeatures.json"),
    };
    let wing = WingParams::load(wing_path).usage()?;
    let table = MetaFeatureTable::load(&mf_path).usage()?;
    let store = table.attach(store).usage()?;
    Ok((wing, table, store))
}

fn check_budget(k: usize, budget: usize) -> CmdResult {
    if k == 0 || k >= budget {
        return Err(usage_err(format!("need 1 <= k < T, got k = {k}, T = {budget}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    parameters: serde_json::Value,
    seed: u64,
    outputs: Vec<String>,
    version: &'static str,
    duration_secs: f64,
}

fn write_manifest<P: Serialize>(
    path: &Path,
    command: &str,
    config_path: Option<&Path>,
    params: &P,
    seed: u64,
    outputs: &[&Path],
    start: Instant,
) -> CmdResult {
    let m = Manifest {
        command,
        config_path,
        parameters: serde_json::to_value(params).runtime()?,
        seed,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION"),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&m).runtime()?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        Some(p) => {
            prepare_file(p)?;
            let f = File::create(p).with_context(|| format!("creating {}", p.display())).usage()?;
            Ok(Box::new(f))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn format_vector(v: &HyperparameterVector) -> String {
    let parts: Vec<String> = v.values().iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn make_collection(mut a: MakeCollectionArgs) -> CmdResult {
    let start = Instant::now();
    let space = match &a.space {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading space {}", p.display())).usage()?;
            serde_json::from_str::<HyperparameterSpace>(&text).with_context(|| format!("parsing space {}", p.display())).usage()?
        }
        None => HyperparameterSpace::canonical_cnn(),
    };
    prepare_dir(&a.out)?;

    let (store, held_out) = if a.realizable {
        let d = RealizableSpec::default();
        let spec = RealizableSpec {
            records: a.records,
            instance_dim: *a.instance_dim.get_or_insert(d.instance_dim),
            instances_per_record: *a.instances_per_task.get_or_insert(d.instances_per_record),
            grid_size: *a.grid_size.get_or_insert(d.grid_size),
            seed: a.seed,
        };
        (realizable_store(&spec, &space).usage()?, Vec::new())
    } else {
        let d = CollectionSpec::default();
        let spec = CollectionSpec {
            family_count: a.families,
            fractions: a.fractions.clone(),
            instance_dim: *a.instance_dim.get_or_insert(d.instance_dim),
            instances_per_task: *a.instances_per_task.get_or_insert(d.instances_per_task),
            grid_size: *a.grid_size.get_or_insert(d.grid_size),
            bumps: a.bumps,
            num_classes: a.classes,
            held_out: *a.held_out.get_or_insert(d.held_out.min(a.families)),
            seed: a.seed,
        };
        spec.validate().usage()?;
        let c = synthbench::make_collection(&spec, &space).runtime()?;
        (c.store, c.held_out)
    };

    let store_path = a.out.join("store.json");
    let tasks_path = a.out.join("heldout.json");
    store.save(&store_path).runtime()?;
    save_tasks(&held_out, &tasks_path).with_context(|| format!("writing {}", tasks_path.display())).runtime()?;
    write_manifest(
        &a.out.join("manifest.json"),
        "make-collection",
        a.config.as_deref(),
        &a,
        a.seed,
        &[&store_path, &tasks_path],
        start,
    )?;
    println!(
        "K = {} records, n = {} grid points, {} held-out tasks; store written to {}",
        store.len(),
        store.grid().len(),
        held_out.len(),
        store_path.display()
    );
    Ok(())
}

pub fn train_metric(mut a: TrainMetricArgs) -> CmdResult {
    let start = Instant::now();
    let store = load_store(&a.store)?;
    if store.len() < 2 {
        return Err(usage_err(format!("metric training needs at least 2 records, the store has {}", store.len())));
    }
    let total_pairs = store.len() * (store.len() - 1) / 2;
    let cfg = TrainConfig {
        tau: a.tau,
        iterations: a.iterations,
        batch_pairs: a.batch_pairs,
        step_size: a.step_size,
        decay: a.decay,
        seed: a.seed,
        validation_pairs: *a.validation_pairs.get_or_insert(20.min(total_pairs / 4)),
        log_every: a.log_every,
        extractor: a.extractor.clone(),
        head: a.head.clone(),
        meta_dim: a.meta_dim,
    };
    cfg.validate().usage()?;
    prepare_dir(&a.out)?;

    let out = match metafeature::train(&store, &cfg) {
        Ok(o) => o,
        Err(e @ (MetaFeatureError::InvalidConfig(_) | MetaFeatureError::TooFewRecords(_))) => return Err(Failure::Usage(e.into())),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    let wing_path = a.out.join("wing.json");
    let loss_path = a.out.join("loss.csv");
    let mf_path = a.out.join("metafeatures.json");
    out.wing.save(&wing_path).runtime()?;
    out.write_trace_csv(&loss_path).runtime()?;
    MetaFeatureTable::compute(&out.wing, &store, cfg.tau, cfg.seed).runtime()?.save(&mf_path).runtime()?;
    write_manifest(
        &a.out.join("manifest.json"),
        "train-metric",
        a.config.as_deref(),
        &a,
        a.seed,
        &[&wing_path, &loss_path, &mf_path],
        start,
    )?;

    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        let val = |r: &metafeature::LossRow| r.val_loss.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "n/a".into());
        println!(
            "train loss {:.4e} -> {:.4e}, validation loss {} -> {} after {} iterations",
            first.train_loss,
            last.train_loss,
            val(first),
            val(last),
            cfg.iterations
        );
    }
    println!("wing written to {}", wing_path.display());
    Ok(())
}

fn write_trace(trace: &Trace, path: &Path) -> CmdResult {
    let f = File::create(path).with_context(|| format!("creating {}", path.display())).runtime()?;
    trace.write_csv(io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display())).runtime()
}

pub fn run(a: RunArgs) -> CmdResult {
    let start = Instant::now();
    check_budget(a.k, a.budget)?;
    let method = InitMethod::from_str(&a.init).usage()?;
    let kind = AcquisitionKind::from_str(&a.acq).usage()?;
    let store = load_store(&a.store)?;
    let tasks = load_task_file(&a.store, a.tasks.as_deref())?;
    let task = match &a.task {
        Some(id) => tasks.iter().find(|t| &t.id == id).ok_or_else(|| usage_err(format!("no task with id '{id}'")))?,
        None => &tasks[0],
    };
    let space = store.grid().space().clone();
    let acq = AcquisitionConfig { kind, kappa: a.kappa, maximizer_budget: a.maximizer_budget, seed: a.seed, ..Default::default() };
    acq.validate().usage()?;
    prepare_file(&a.out)?;

    let mut target = |v: &HyperparameterVector| evaluate_task(task, &space, v).unwrap_or(f64::NAN);
    let result = match method.baseline() {
        Some(sm) => {
            let init = baseline_init(sm, &space, a.k, a.seed).usage()?;
            run_bho(&mut target, &space, &init, a.budget, &acq, method.as_str())
        }
        None => {
            let (wing, table, store) = load_warm(a.wing.as_deref(), a.metafeatures.as_deref(), store)?;
            if store.index_of(&task.id).is_ok() {
                return Err(usage_err(format!("task '{}' is part of the history store", task.id)));
            }
            let warm = WarmStart { embedder: &wing, store: &store, tau: table.tau, seed: table.seed, k: a.k };
            run_warm_bho(&warm, &task.instances, &mut target, &space, a.budget, &acq)
        }
    };
    let trace = match result {
        Ok(t) => t,
        Err(BhoError::NonFiniteTarget { evaluation, value, partial }) => {
            write_trace(&partial, &a.out)?;
            return Err(Failure::Runtime(anyhow!(
                "target returned {value} at evaluation {evaluation}; partial trace written to {}",
                a.out.display()
            )));
        }
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    write_trace(&trace, &a.out)?;
    let manifest = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    write_manifest(&manifest, "run", a.config.as_deref(), &a, a.seed, &[&a.out], start)?;

    let (best, error) = trace.best().expect("a run evaluates at least once");
    println!("task {} with {} init: best error {error:.6} at {}", task.id, method, format_vector(best));
    Ok(())
}

pub fn compare(a: CompareArgs) -> CmdResult {
    let start = Instant::now();
    check_budget(a.k, a.budget)?;
    if a.seeds == 0 || a.jobs == 0 {
        return Err(usage_err("--seeds and --jobs must be at least 1"));
    }
    let methods = a.methods.iter().map(|m| InitMethod::from_str(m)).collect::<Result<Vec<_>, _>>().usage()?;
    let acquisitions = a.acqs.iter().map(|s| AcquisitionKind::from_str(s)).collect::<Result<Vec<_>, _>>().usage()?;
    let store = load_store(&a.store)?;
    let tasks = load_task_file(&a.store, a.tasks.as_deref())?;
    let space = store.grid().space().clone();
    let cfg = CompareConfig {
        methods,
        acquisitions,
        k: a.k,
        budget: a.budget,
        seeds: a.seeds,
        base_seed: a.seed,
        jobs: a.jobs,
        acquisition: AcquisitionConfig { kappa: a.kappa, maximizer_budget: a.maximizer_budget, ..Default::default() },
    };
    cfg.acquisition.validate().usage()?;

    let warm_parts = if cfg.methods.contains(&InitMethod::Warmstart) {
        let parts = load_warm(a.wing.as_deref(), a.metafeatures.as_deref(), store)?;
        if let Some(t) = tasks.iter().find(|t| parts.2.index_of(&t.id).is_ok()) {
            return Err(usage_err(format!("held-out task '{}' is part of the history store", t.id)));
        }
        Some(parts)
    } else {
        None
    };
    let warm = warm_parts
        .as_ref()
        .map(|(wing, table, store)| WarmStart { embedder: wing, store, tau: table.tau, seed: table.seed, k: a.k });

    prepare_dir(&a.out)?;
    let cmp_path = a.out.join("comparison.csv");
    let summary_path = a.out.join("summary.csv");
    let file = File::create(&cmp_path).with_context(|| format!("creating {}", cmp_path.display())).usage()?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(COMPARISON_HEADER).runtime()?;
    w.flush().runtime()?;

    let sink = |cell: &synthbench::CellResult| -> io::Result<()> {
        write_cell_rows(&mut w, cell).map_err(io::Error::other)?;
        w.flush()
    };
    let comparison = compare_initializations(&tasks, &space, warm.as_ref(), &cfg, sink).map_err(|e| {
        Failure::Runtime(anyhow!(
            "{e}; rows for the {} completed cells are in {}",
            e.completed.cells.len(),
            cmp_path.display()
        ))
    })?;

    let rows = comparison.summary();
    let f = File::create(&summary_path).with_context(|| format!("creating {}", summary_path.display())).runtime()?;
    write_summary(f, &rows).runtime()?;
    write_manifest(
        &a.out.join("manifest.json"),
        "compare",
        a.config.as_deref(),
        &a,
        a.seed,
        &[&cmp_path, &summary_path],
        start,
    )?;

    println!("{:<10} {:<4} {:>12} {:>12}", "method", "acq", "median_best", "mean_best");
    for r in rows.iter().filter(|r| r.iteration == a.budget) {
        println!("{:<10} {:<4} {:>12.6} {:>12.6}", r.method.as_str(), r.acq.as_str(), r.median_best, r.mean_best);
    }
    println!("{} cells written to {}", comparison.cells.len(), cmp_path.display());
    Ok(())
}

pub fn ccov(a: CcovArgs) -> CmdResult {
    let store = load_store(&a.store)?;
    let grid = store.grid();
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["record_id", "dim_name", "subtracted_ccov", "warning"]).runtime()?;
    for r in store.records() {
        for (d, spec) in grid.space().dims().iter().enumerate() {
            let (value, warning) = match ccov_at(r, grid, d) {
                Ok(c) => (c - 0.5, String::new()),
                Err(HistoryError::DegenerateDimension(_)) => (f64::NAN, "degenerate dimension: every grid point shares one value".into()),
                Err(HistoryError::UndefinedCcov) => (f64::NAN, "undefined: errors sum to zero".into()),
                Err(e) => return Err(Failure::Runtime(e.into())),
            };
            if !warning.is_empty() {
                eprintln!("warning: {} / {}: {warning}", r.id, spec.name());
            }
            w.write_record([r.id.as_str(), spec.name(), &value.to_string(), &warning]).runtime()?;
        }
    }
    w.flush().runtime()
}

pub fn sample(a: SampleArgs) -> CmdResult {
    let method = SampleMethod::from_str(&a.method).usage()?;
    let batch = sampling::sample(method, a.d, a.k, a.seed).usage()?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record((1..=a.d).map(|i| format!("u{i}"))).runtime()?;
    for p in &batch.points {
        w.write_record(p.iter().map(|x| x.to_string())).runtime()?;
    }
    w.flush().runtime()
}
