//! Synthetic task families for exercising warm-started optimization end to end.
//!
//! Each family has a multimodal error surface over the normalized space (a
//! baseline minus a few Gaussian bumps) and a Gaussian instance cloud whose
//! mean is a fixed linear function of the surface parameters. Fraction
//! variants of a family move the surface parameters along a fixed
//! per-family direction by `1 − fraction`, so related tasks have related
//! surfaces and related instances.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcquisitionConfig, AcquisitionKind};
use crate::bho::{run_bho, run_warm_bho, BhoError, Trace, WarmStart};
use crate::history::{DatasetRecord, EvaluationGrid, HistoryError, HistoryStore, InstanceSet};
use crate::hyperspace::{HyperparameterSpace, HyperparameterVector, SpaceError};
use crate::metafeature::DatasetEmbedder;
use crate::rng::{self, Stream};
use crate::sampling::{self, SampleMethod};

/// Lowest error any surface reports.
pub const ERROR_FLOOR: f64 = 0.02;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Bho(#[from] BhoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub depth: f64,
}

/// `clamp(baseline − Σ depth·exp(−‖u − c‖² / 2w²), ERROR_FLOOR, 1)` on the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub baseline: f64,
    pub bumps: Vec<Bump>,
}

impl Surface {
    pub fn value(&self, u: &[f64]) -> f64 {
        let dip: f64 = self
            .bumps
            .iter()
            .map(|b| {
                let r2: f64 = b.center.iter().zip(u).map(|(c, x)| (x - c) * (x - c)).sum();
                b.depth * (-r2 / (2.0 * b.width * b.width)).exp()
            })
            .sum();
        (self.baseline - dip).clamp(ERROR_FLOOR, 1.0)
    }

    /// Centers, widths, depths, then the baseline.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for b in &self.bumps {
            p.extend_from_slice(&b.center);
            p.push(b.width);
            p.push(b.depth);
        }
        p.push(self.baseline);
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub family: usize,
    pub fraction: f64,
    pub surface: Surface,
    pub instance_mean: Vec<f64>,
    pub instance_scale: f64,
    pub instances: InstanceSet,
}

pub fn save_tasks(tasks: &[SyntheticTask], path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, serde_json::to_string(tasks)?)
}

pub fn load_tasks(path: &std::path::Path) -> std::io::Result<Vec<SyntheticTask>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Error of `task` at `v`; integer-cast coordinates are truncated first.
pub fn evaluate_task(task: &SyntheticTask, space: &HyperparameterSpace, v: &HyperparameterVector) -> Result<f64, SpaceError> {
    let cast = HyperparameterVector::new(space.cast_for_evaluation(v)?);
    Ok(task.surface.value(&space.normalize(&cast)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionSpec {
    pub family_count: usize,
    pub fractions: Vec<f64>,
    pub instance_dim: usize,
    /// Instances of a fraction-1.0 task; a variant gets `fraction` of them.
    pub instances_per_task: usize,
    pub grid_size: usize,
    pub bumps: usize,
    pub num_classes: usize,
    /// Families that also get a held-out test task.
    pub held_out: usize,
    pub seed: u64,
}

impl Default for CollectionSpec {
    fn default() -> Self {
        Self {
            family_count: 8,
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            instance_dim: 16,
            instances_per_task: 200,
            grid_size: 64,
            bumps: 3,
            num_classes: 4,
            held_out: 4,
            seed: 0,
        }
    }
}

impl CollectionSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidConfig(m));
        let counts = [
            ("family_count", self.family_count),
            ("instance_dim", self.instance_dim),
            ("instances_per_task", self.instances_per_task),
            ("grid_size", self.grid_size),
            ("bumps", self.bumps),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.fractions.is_empty() {
            return bad("at least one fraction is required".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("fraction {f} is outside (0, 1]"));
        }
        if self.held_out > self.family_count {
            return bad(format!("{} held-out tasks but only {} families", self.held_out, self.family_count));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Collection {
    pub store: HistoryStore,
    /// One task per store record, in record order.
    pub tasks: Vec<SyntheticTask>,
    /// Test tasks, never part of `store`.
    pub held_out: Vec<SyntheticTask>,
}

struct Family {
    base: Surface,
    center_shift: Vec<Vec<f64>>,
    depth_shift: Vec<f64>,
    baseline_shift: f64,
}

impl Family {
    fn draw(rng: &mut ChaCha8Rng, d: usize, bumps: usize) -> Self {
        let mut base = Surface { baseline: rng.random_range(0.85..0.95), bumps: Vec::with_capacity(bumps) };
        let mut center_shift = Vec::with_capacity(bumps);
        let mut depth_shift = Vec::with_capacity(bumps);
        for q in 0..bumps {
            let (depth, width) = if q == 0 {
                (rng.random_range(0.6..0.85), rng.random_range(0.3..0.45))
            } else {
                (rng.random_range(0.2..0.45), rng.random_range(0.15..0.3))
            };
            let center = (0..d).map(|_| rng.random_range(0.1..0.9)).collect();
            base.bumps.push(Bump { center, width, depth });
            let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            center_shift.push(dir.into_iter().map(|x| 0.25 * x / norm).collect());
            depth_shift.push(rng.random_range(-0.15..0.15));
        }
        let baseline_shift = rng.random_range(-0.05..0.05);
        Self { base, center_shift, depth_shift, baseline_shift }
    }

    fn variant(&self, fraction: f64) -> Surface {
        if fraction == 1.0 {
            return self.base.clone();
        }
        let s = 1.0 - fraction;
        let bumps = self
            .base
            .bumps
            .iter()
            .zip(&self.center_shift)
            .zip(&self.depth_shift)
            .map(|((b, dc), dd)| Bump {
                center: b.center.iter().zip(dc).map(|(c, x)| (c + s * x).clamp(0.0, 1.0)).collect(),
                width: b.width,
                depth: (b.depth + s * dd).clamp(0.05, 0.95),
            })
            .collect();
        Surface { baseline: (self.base.baseline + s * self.baseline_shift).clamp(0.5, 1.0), bumps }
    }
}

/// Linear maps shared by a whole collection: surface parameters to instance
/// mean, and instance to class.
struct InstanceModel {
    projection: Vec<Vec<f64>>,
    classes: Vec<Vec<f64>>,
    scale: f64,
}

impl InstanceModel {
    fn draw(rng: &mut ChaCha8Rng, param_len: usize, dim: usize, num_classes: usize) -> Self {
        let p_scale = 2.0 / (param_len as f64).sqrt();
        let projection = (0..dim)
            .map(|_| (0..param_len).map(|_| p_scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let classes = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self { projection, classes, scale: 0.5 }
    }

    fn mean(&self, surface: &Surface) -> Vec<f64> {
        let p: Vec<f64> = surface.params().into_iter().map(|x| x - 0.5).collect();
        self.projection.iter().map(|row| row.iter().zip(&p).map(|(a, b)| a * b).sum()).collect()
    }

    fn label(&self, x: &[f64]) -> u32 {
        let score = |w: &Vec<f64>| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let mut best = 0;
        for c in 1..self.classes.len() {
            if score(&self.classes[c]) > score(&self.classes[best]) {
                best = c;
            }
        }
        best as u32
    }

    fn sample(&self, mean: &[f64], count: usize, rng: &mut ChaCha8Rng) -> InstanceSet {
        let mut data = Vec::with_capacity(count * mean.len());
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let x: Vec<f64> = mean.iter().map(|m| m + self.scale * rng.sample::<f64, _>(StandardNormal)).collect();
            labels.push(self.label(&x));
            data.extend(x);
        }
        InstanceSet::new(mean.len(), data, labels).expect("generated instances are well formed")
    }
}

/// `n` distinct Halton points of `space` (after snapping), from index 1.
pub fn halton_grid(space: &HyperparameterSpace, n: usize) -> Result<EvaluationGrid, BenchError> {
    let d = space.dim_count();
    let mut points: Vec<HyperparameterVector> = Vec::with_capacity(n);
    let mut next = 1u64;
    while points.len() < n {
        let want = n - points.len();
        let batch = sampling::halton(d, want, next).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        next += want as u64;
        for u in batch.points {
            let v = space.denormalize(&u)?;
            if !points.contains(&v) {
                points.push(v);
            }
        }
        if next > 1_000_000 {
            return Err(BenchError::InvalidConfig(format!("the space has fewer than {n} distinct grid points")));
        }
    }
    Ok(EvaluationGrid::new(space.clone(), points)?)
}

fn frac_tag(f: f64) -> String {
    format!("{:03}", (f * 100.0).round() as i64)
}

/// Builds the training store and held-out tasks described by `spec`.
pub fn make_collection(spec: &CollectionSpec, space: &HyperparameterSpace) -> Result<Collection, BenchError> {
    spec.validate()?;
    let d = space.dim_count();
    let mut rng = rng::stream(spec.seed, Stream::Collection);
    let families: Vec<Family> = (0..spec.family_count).map(|_| Family::draw(&mut rng, d, spec.bumps)).collect();
    let param_len = families[0].base.params().len();
    let model = InstanceModel::draw(&mut rng, param_len, spec.instance_dim, spec.num_classes);
    let grid = halton_grid(space, spec.grid_size)?;

    let mut tasks = Vec::with_capacity(spec.family_count * spec.fractions.len());
    let mut records = Vec::with_capacity(tasks.capacity());
    for (fi, family) in families.iter().enumerate() {
        for &fraction in &spec.fractions {
            let index = tasks.len() as u32;
            let surface = family.variant(fraction);
            let mean = model.mean(&surface);
            let count = ((fraction * spec.instances_per_task as f64).round() as usize).max(1);
            let instances = model.sample(&mean, count, &mut rng::indexed_stream(spec.seed, Stream::Instances, index));
            let task = SyntheticTask {
                id: format!("family{fi}-frac{}", frac_tag(fraction)),
                family: fi,
                fraction,
                surface,
                instance_mean: mean,
                instance_scale: model.scale,
                instances,
            };
            let errors = grid
                .points()
                .iter()
                .map(|v| evaluate_task(&task, space, v))
                .collect::<Result<Vec<_>, _>>()?;
            records.push(DatasetRecord {
                id: task.id.clone(),
                fraction,
                parent: Some(format!("family{fi}")),
                errors,
                instances: task.instances.clone(),
            });
            tasks.push(task);
        }
    }

    let mut held_rng = rng::stream(spec.seed, Stream::HeldOut);
    let held_out = families
        .iter()
        .take(spec.held_out)
        .enumerate()
        .map(|(fi, family)| {
            let mut surface = family.base.clone();
            for b in &mut surface.bumps {
                for c in &mut b.center {
                    *c = (*c + 0.02 * held_rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
                }
            }
            let mean = model.mean(&surface);
            let instances = model.sample(&mean, spec.instances_per_task, &mut held_rng);
            SyntheticTask {
                id: format!("family{fi}-test"),
                family: fi,
                fraction: 1.0,
                surface,
                instance_mean: mean,
                instance_scale: model.scale,
                instances,
            }
        })
        .collect();

    Ok(Collection { store: HistoryStore::new(grid, records)?, tasks, held_out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizableSpec {
    pub records: usize,
    pub instance_dim: usize,
    pub instances_per_record: usize,
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for RealizableSpec {
    fn default() -> Self {
        Self { records: 24, instance_dim: 8, instances_per_record: 64, grid_size: 32, seed: 0 }
    }
}

/// A store whose target distances are exactly `c·|s_i − s_j|` for a hidden
/// scalar `s` per record, and whose instances are `s·a·u` plus noise
/// orthogonal to a fixed unit direction `u`. Projecting any subsample mean onto
/// `u` recovers `s`, so a linear embedding reproduces every target distance.
pub fn realizable_store(spec: &RealizableSpec, space: &HyperparameterSpace) -> Result<HistoryStore, BenchError> {
    if spec.records < 2 || spec.instance_dim < 2 || spec.instances_per_record == 0 || spec.grid_size == 0 {
        return Err(BenchError::InvalidConfig("realizable store needs ≥ 2 records, dim ≥ 2, instances and a grid".into()));
    }
    let mut rng = rng::stream(spec.seed, Stream::Collection);
    let grid = halton_grid(space, spec.grid_size)?;
    let base: Vec<f64> = (0..spec.grid_size).map(|_| rng.random_range(0.1..0.4)).collect();
    let slope: Vec<f64> = (0..spec.grid_size).map(|_| rng.random_range(0.0..0.5)).collect();
    let dir: Vec<f64> = (0..spec.instance_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u: Vec<f64> = dir.into_iter().map(|x| x / norm).collect();

    let records = (0..spec.records)
        .map(|r| {
            let s = r as f64 / (spec.records - 1) as f64;
            let mut irng = rng::indexed_stream(spec.seed, Stream::Instances, r as u32);
            let mut data = Vec::with_capacity(spec.instances_per_record * spec.instance_dim);
            for _ in 0..spec.instances_per_record {
                let noise: Vec<f64> = (0..spec.instance_dim).map(|_| 0.5 * irng.sample::<f64, _>(StandardNormal)).collect();
                let along: f64 = noise.iter().zip(&u).map(|(a, b)| a * b).sum();
                data.extend(noise.iter().zip(&u).map(|(e, ui)| 2.0 * s * ui + e - along * ui));
            }
            DatasetRecord {
                id: format!("real{r:02}"),
                fraction: 1.0,
                parent: None,
                errors: base.iter().zip(&slope).map(|(b, w)| b + s * w).collect(),
                instances: InstanceSet::new(spec.instance_dim, data, vec![0; spec.instances_per_record])
                    .expect("generated instances are well formed"),
            }
        })
        .collect();
    Ok(HistoryStore::new(grid, records)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Uniform,
    Latin,
    Halton,
    Warmstart,
}

impl InitMethod {
    pub const ALL: [InitMethod; 4] = [InitMethod::Uniform, InitMethod::Latin, InitMethod::Halton, InitMethod::Warmstart];

    pub fn as_str(&self) -> &'static str {
        match self {
            InitMethod::Uniform => "uniform",
            InitMethod::Latin => "latin",
            InitMethod::Halton => "halton",
            InitMethod::Warmstart => "warmstart",
        }
    }

    pub fn baseline(&self) -> Option<SampleMethod> {
        match self {
            InitMethod::Uniform => Some(SampleMethod::Uniform),
            InitMethod::Latin => Some(SampleMethod::Latin),
            InitMethod::Halton => Some(SampleMethod::Halton),
            InitMethod::Warmstart => None,
        }
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitMethod {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InitMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BenchError::InvalidConfig(format!("unknown init method '{s}'")))
    }
}

/// Baseline initial design of `k` vectors.
pub fn baseline_init(
    method: SampleMethod,
    space: &HyperparameterSpace,
    k: usize,
    seed: u64,
) -> Result<Vec<HyperparameterVector>, BenchError> {
    let batch = sampling::sample(method, space.dim_count(), k, seed).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    Ok(batch.points.iter().map(|u| space.denormalize(u)).collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub methods: Vec<InitMethod>,
    pub acquisitions: Vec<AcquisitionKind>,
    pub k: usize,
    pub budget: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Cells run concurrently; results do not depend on it.
    pub jobs: usize,
    pub acquisition: AcquisitionConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: InitMethod::ALL.to_vec(),
            acquisitions: vec![AcquisitionKind::Ei, AcquisitionKind::Ucb],
            k: 3,
            budget: 15,
            seeds: 5,
            base_seed: 0,
            jobs: 1,
            acquisition: AcquisitionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub task_id: String,
    pub method: InitMethod,
    pub acq: AcquisitionKind,
    pub seed: usize,
    pub trace: Trace,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: InitMethod,
    pub acq: AcquisitionKind,
    pub iteration: usize,
    pub median_best: f64,
    pub mean_best: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub cells: Vec<CellResult>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl Comparison {
    /// Median final best-so-far over seeds for one (task, method, acquisition).
    pub fn final_median(&self, task_id: &str, method: InitMethod, acq: AcquisitionKind) -> Option<f64> {
        let mut v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.task_id == task_id && c.method == method && c.acq == acq)
            .filter_map(|c| c.trace.best_so_far.last().copied())
            .collect();
        (!v.is_empty()).then(|| median(&mut v))
    }

    /// Per-iteration median and mean best-so-far over tasks and seeds.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(InitMethod, AcquisitionKind)> = self.cells.iter().map(|c| (c.method, c.acq)).collect();
        keys.sort_by_key(|(m, a)| (*m, a.as_str()));
        keys.dedup();
        let mut out = Vec::new();
        for (method, acq) in keys {
            let group: Vec<&CellResult> = self.cells.iter().filter(|c| c.method == method && c.acq == acq).collect();
            let len = group.iter().map(|c| c.trace.best_so_far.len()).max().unwrap_or(0);
            for t in 0..len {
                let mut vals: Vec<f64> = group.iter().filter_map(|c| c.trace.best_so_far.get(t).copied()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                out.push(SummaryRow { method, acq, iteration: t + 1, median_best: median(&mut vals), mean_best: mean });
            }
        }
        out
    }
}

/// Writes `(task_id, method, acq, seed, iteration, best_so_far)` rows for one cell.
pub fn write_cell_rows<W: std::io::Write>(w: &mut csv::Writer<W>, cell: &CellResult) -> csv::Result<()> {
    for (t, b) in cell.trace.best_so_far.iter().enumerate() {
        w.write_record([
            cell.task_id.as_str(),
            cell.method.as_str(),
            cell.acq.as_str(),
            &cell.seed.to_string(),
            &(t + 1).to_string(),
            &b.to_string(),
        ])?;
    }
    Ok(())
}

pub const COMPARISON_HEADER: [&str; 6] = ["task_id", "method", "acq", "seed", "iteration", "best_so_far"];

pub fn write_summary<W: std::io::Write>(out: W, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "acq", "iteration", "median_best", "mean_best"])?;
    for r in rows {
        w.write_record([
            r.method.as_str(),
            r.acq.as_str(),
            &r.iteration.to_string(),
            &r.median_best.to_string(),
            &r.mean_best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A harness failure together with every cell that completed before it.
#[derive(Debug, Error)]
#[error("{source} ({} cells completed)", completed.cells.len())]
pub struct CompareError {
    #[source]
    pub source: BenchError,
    pub completed: Comparison,
}

/// Runs every (task, method, acquisition, seed) cell. Cells execute `jobs` at
/// a time and are handed to `sink` in sorted order as each batch finishes.
pub fn compare_initializations<E, S>(
    held_out: &[SyntheticTask],
    space: &HyperparameterSpace,
    warm: Option<&WarmStart<'_, E>>,
    cfg: &CompareConfig,
    mut sink: S,
) -> Result<Comparison, CompareError>
where
    E: DatasetEmbedder + Sync + ?Sized,
    S: FnMut(&CellResult) -> std::io::Result<()>,
{
    let fail = |source: BenchError, completed: Comparison| CompareError { source, completed };
    let check = || -> Result<(), BenchError> {
        if cfg.k == 0 || cfg.k > cfg.budget || cfg.seeds == 0 || cfg.jobs == 0 {
            return Err(BenchError::InvalidConfig("need 1 ≤ k ≤ budget, seeds ≥ 1 and jobs ≥ 1".into()));
        }
        if cfg.methods.contains(&InitMethod::Warmstart) {
            let w = warm.ok_or_else(|| BenchError::InvalidConfig("warmstart requested without a trained store".into()))?;
            if let Some(t) = held_out.iter().find(|t| w.store.index_of(&t.id).is_ok()) {
                return Err(BenchError::InvalidConfig(format!("held-out task '{}' is in the training store", t.id)));
            }
        }
        Ok(())
    };
    check().map_err(|e| fail(e, Comparison::default()))?;

    let mut keys = Vec::new();
    for ti in 0..held_out.len() {
        for &m in &cfg.methods {
            for &a in &cfg.acquisitions {
                for s in 0..cfg.seeds {
                    keys.push((ti, m, a, s));
                }
            }
        }
    }
    keys.sort_by_key(|&(ti, m, a, s)| (ti, m, a.as_str(), s));

    let run_cell = |&(ti, method, acq, s): &(usize, InitMethod, AcquisitionKind, usize)| -> Result<CellResult, BenchError> {
        let task = &held_out[ti];
        let seed = rng::indexed_stream(cfg.base_seed, Stream::Harness, (ti * 10_000 + s) as u32).random::<u64>();
        let acq_cfg = AcquisitionConfig { kind: acq, seed, ..cfg.acquisition.clone() };
        let mut target = |v: &HyperparameterVector| evaluate_task(task, space, v).unwrap_or(f64::NAN);
        let mut trace = match (method.baseline(), warm) {
            (Some(sm), _) => {
                let init = baseline_init(sm, space, cfg.k, seed)?;
                run_bho(&mut target, space, &init, cfg.budget, &acq_cfg, method.as_str())?
            }
            (None, Some(w)) => {
                let w = WarmStart { k: cfg.k, ..w.clone() };
                run_warm_bho(&w, &task.instances, &mut target, space, cfg.budget, &acq_cfg)?
            }
            (None, None) => unreachable!("checked above"),
        };
        trace.seed = s as u64;
        Ok(CellResult { task_id: task.id.clone(), method, acq, seed: s, trace })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| fail(BenchError::InvalidConfig(e.to_string()), Comparison::default()))?;
    let mut done = Comparison::default();
    for batch in keys.chunks(cfg.jobs) {
        let results: Vec<Result<CellResult, BenchError>> = pool.install(|| batch.par_iter().map(run_cell).collect());
        let mut first_err = None;
        for r in results {
            match r {
                Ok(cell) => {
                    if let Err(e) = sink(&cell) {
                        return Err(fail(BenchError::InvalidConfig(format!("writing results: {e}")), done));
                    }
                    done.cells.push(cell);
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_err {
            return Err(fail(e, done));
        }
    }
    Ok(done)
}
