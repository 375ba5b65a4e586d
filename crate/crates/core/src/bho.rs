//! The optimization loops: plain GP-based optimization from a given initial
//! design, and the warm-started variant whose initial design is the grid-best
//! vectors of the nearest stored datasets.

use std::io::Write;

use thiserror::Error;

use crate::acquisition::{maximize_in_unit_cube, AcquisitionConfig, AcquisitionError};
use crate::gp::{FitConfig, GpError, GpModel};
use crate::history::{HistoryError, HistoryStore, InstanceSet};
use crate::hyperspace::{HyperparameterSpace, HyperparameterVector, SpaceError};
use crate::metafeature::{knn, DatasetEmbedder, MetaFeatureError};

/// Default number of warm-start vectors.
pub const DEFAULT_WARM_START_K: usize = 3;

/// Normalized distance below which a proposal counts as already acquired.
const DUPLICATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BhoError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("target returned non-finite value {value} at evaluation {evaluation}")]
    NonFiniteTarget { evaluation: usize, value: f64, partial: Box<Trace> },
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    MetaFeature(#[from] MetaFeatureError),
    #[error(transparent)]
    History(#[from] HistoryError),
}

/// Evaluates a hyperparameter vector to a validation error.
pub trait TargetFunction {
    fn evaluate(&mut self, v: &HyperparameterVector) -> f64;
}

impl<F: FnMut(&HyperparameterVector) -> f64> TargetFunction for F {
    fn evaluate(&mut self, v: &HyperparameterVector) -> f64 {
        self(v)
    }
}

/// Everything a run acquired, in evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub acquired: Vec<(HyperparameterVector, f64)>,
    pub best_so_far: Vec<f64>,
    pub init_count: usize,
    pub method: String,
    pub seed: u64,
}

impl Trace {
    pub fn new(method: impl Into<String>, init_count: usize, seed: u64) -> Self {
        Self { acquired: Vec::new(), best_so_far: Vec::new(), init_count, method: method.into(), seed }
    }

    fn push(&mut self, v: HyperparameterVector, error: f64) {
        let best = self.best_so_far.last().map_or(error, |b| b.min(error));
        self.acquired.push((v, error));
        self.best_so_far.push(best);
    }

    pub fn len(&self) -> usize {
        self.acquired.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquired.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = f64> + '_ {
        self.acquired.iter().map(|(_, e)| *e)
    }

    /// Lowest-error acquired vector; ties go to the earliest.
    pub fn best(&self) -> Option<&(HyperparameterVector, f64)> {
        self.acquired.iter().reduce(|a, b| if b.1 < a.1 { b } else { a })
    }

    /// CSV with columns `iteration, theta_1..theta_d, error, best_so_far,
    /// method, seed, phase`; `phase` is `init` or `bo`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let d = self.acquired.first().map_or(0, |(v, _)| v.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=d).map(|i| format!("theta_{i}")));
        header.extend(["error", "best_so_far", "method", "seed", "phase"].map(String::from));
        w.write_record(&header)?;
        for (t, ((v, e), b)) in self.acquired.iter().zip(&self.best_so_far).enumerate() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(v.values().iter().map(f64::to_string));
            row.push(e.to_string());
            row.push(b.to_string());
            row.push(self.method.clone());
            row.push(self.seed.to_string());
            row.push(if t < self.init_count { "init" } else { "bo" }.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `init`, then adds one GP-guided evaluation at a time until the
/// trace holds `budget` evaluations.
pub fn run_bho<T: TargetFunction + ?Sized>(
    target: &mut T,
    space: &HyperparameterSpace,
    init: &[HyperparameterVector],
    budget: usize,
    acq: &AcquisitionConfig,
    method: &str,
) -> Result<Trace, BhoError> {
    acq.validate()?;
    if init.is_empty() {
        return Err(BhoError::InvalidConfig("at least one initial vector is required".into()));
    }
    if init.len() > budget {
        return Err(BhoError::InvalidConfig(format!("{} initial vectors exceed the budget of {budget}", init.len())));
    }
    for (i, v) in init.iter().enumerate() {
        if !space.validate(v)? {
            return Err(BhoError::InvalidConfig(format!("initial vector {i} is outside the space")));
        }
    }

    let mut trace = Trace::new(method, init.len(), acq.seed);
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut evaluate = |trace: &mut Trace, inputs: &mut Vec<Vec<f64>>, v: HyperparameterVector| {
        let error = target.evaluate(&v);
        if !error.is_finite() {
            return Err(BhoError::NonFiniteTarget { evaluation: trace.len() + 1, value: error, partial: Box::new(trace.clone()) });
        }
        inputs.push(space.normalize(&v)?);
        trace.push(v, error);
        Ok(())
    };

    for v in init {
        evaluate(&mut trace, &mut inputs, v.clone())?;
    }
    for j in init.len()..budget {
        let step_seed = acq.seed.wrapping_add(j as u64);
        let errors: Vec<f64> = trace.errors().collect();
        let model = GpModel::fit(inputs.clone(), errors, &FitConfig::with_seed(step_seed))?;
        let cfg = AcquisitionConfig { seed: step_seed, ..acq.clone() };
        let found = maximize_in_unit_cube(&model, space, &cfg)?;
        let taken = |u: &[f64]| inputs.iter().any(|x| euclidean(x, u) < DUPLICATE_TOLERANCE);
        let point = if taken(&found.point) {
            found
                .ranked_halton
                .iter()
                .map(|(u, _)| u)
                .find(|u| !taken(u))
                .cloned()
                .unwrap_or(found.point)
        } else {
            found.point
        };
        let v = space.denormalize(&point)?;
        evaluate(&mut trace, &mut inputs, v)?;
    }
    Ok(trace)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Grid-best vectors of the `k` stored datasets nearest to `instances`, in
/// ascending distance order. Repeated vectors are kept.
pub fn warm_start_init<E: DatasetEmbedder + ?Sized>(
    embedder: &E,
    store: &HistoryStore,
    instances: &InstanceSet,
    k: usize,
    tau: usize,
    seed: u64,
) -> Result<Vec<HyperparameterVector>, BhoError> {
    let query = embedder.embed(instances, tau, seed)?;
    knn(&query, store, k)?
        .iter()
        .map(|id| Ok(store.best_on_grid(id)?.clone()))
        .collect()
}

/// Settings shared by every warm-started run against one store.
#[derive(Debug)]
pub struct WarmStart<'a, E: DatasetEmbedder + ?Sized> {
    pub embedder: &'a E,
    /// Must carry meta-features computed by `embedder` with `(tau, seed)`.
    pub store: &'a HistoryStore,
    pub tau: usize,
    pub seed: u64,
    pub k: usize,
}

impl<E: DatasetEmbedder + ?Sized> Clone for WarmStart<'_, E> {
    fn clone(&self) -> Self {
        Self { embedder: self.embedder, store: self.store, tau: self.tau, seed: self.seed, k: self.k }
    }
}

/// [`warm_start_init`] followed by [`run_bho`], tagged `warmstart`.
pub fn run_warm_bho<E: DatasetEmbedder + ?Sized, T: TargetFunction + ?Sized>(
    warm: &WarmStart<'_, E>,
    instances: &InstanceSet,
    target: &mut T,
    space: &HyperparameterSpace,
    budget: usize,
    acq: &AcquisitionConfig,
) -> Result<Trace, BhoError> {
    if warm.store.grid().space() != space {
        return Err(BhoError::InvalidConfig("the store's grid lives in a different space".into()));
    }
    if warm.k > budget {
        return Err(BhoError::InvalidConfig(format!("k = {} exceeds the budget of {budget}", warm.k)));
    }
    let init = warm_start_init(warm.embedder, warm.store, instances, warm.k, warm.tau, warm.seed)?;
    run_bho(target, space, &init, budget, acq, "warmstart")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::AcquisitionKind;
    use crate::history::{DatasetRecord, EvaluationGrid};
    use crate::metafeature::{InstanceMeanEmbedder, MetaFeatureTable};
    use crate::sampling;

    fn quad(v: &HyperparameterVector) -> f64 {
        (v.values()[0] - 0.3).powi(2)
    }

    fn line() -> HyperparameterSpace {
        HyperparameterSpace::unit_cube(1).unwrap()
    }

    fn uniform_init(k: usize, seed: u64) -> Vec<HyperparameterVector> {
        sampling::uniform_sample(1, k, seed).unwrap().points.into_iter().map(HyperparameterVector::new).collect()
    }

    fn cheap_acq(seed: u64) -> AcquisitionConfig {
        AcquisitionConfig { maximizer_budget: 256, restarts: 2, seed, ..AcquisitionConfig::default() }
    }

    #[test]
    fn budget_equal_to_init_only_evaluates_init() {
        let init = uniform_init(3, 0);
        let mut calls = 0;
        let mut f = |v: &HyperparameterVector| {
            calls += 1;
            quad(v)
        };
        let t = run_bho(&mut f, &line(), &init, 3, &cheap_acq(0), "uniform").unwrap();
        assert_eq!(calls, 3);
        let got: Vec<_> = t.acquired.iter().map(|(v, _)| v.clone()).collect();
        assert_eq!(got, init);
    }

    #[test]
    fn evaluation_count_and_monotone_best() {
        let mut calls = 0;
        let mut f = |v: &HyperparameterVector| {
            calls += 1;
            quad(v)
        };
        let t = run_bho(&mut f, &line(), &uniform_init(3, 1), 15, &cheap_acq(1), "uniform").unwrap();
        assert_eq!((calls, t.len(), t.best_so_far.len()), (15, 15, 15));
        assert!(t.best_so_far.windows(2).all(|w| w[1] <= w[0]));
        let mut running = f64::INFINITY;
        for (e, b) in t.errors().zip(&t.best_so_far) {
            running = running.min(e);
            assert_eq!(running, *b);
        }
        assert!(t.best_so_far[14] <= t.best_so_far[2]);
    }

    #[test]
    fn quadratic_is_solved_for_most_seeds() {
        let solved = (0..20)
            .filter(|&s| {
                let t = run_bho(&mut quad, &line(), &uniform_init(3, s), 15, &AcquisitionConfig { seed: s, ..AcquisitionConfig::default() }, "uniform").unwrap();
                t.best_so_far[14] <= 0.01
            })
            .count();
        assert!(solved >= 18, "{solved}/20");
    }

    #[test]
    fn runs_are_reproducible() {
        let a = run_bho(&mut quad, &line(), &uniform_init(2, 3), 8, &cheap_acq(3), "uniform").unwrap();
        let b = run_bho(&mut quad, &line(), &uniform_init(2, 3), 8, &cheap_acq(3), "uniform").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn never_reacquires_a_point() {
        // a flat target gives the maximizer no reason to move away from explored points
        let mut flat = |_: &HyperparameterVector| 0.5;
        let t = run_bho(&mut flat, &line(), &uniform_init(2, 0), 10, &cheap_acq(0), "uniform").unwrap();
        for (i, (a, _)) in t.acquired.iter().enumerate() {
            for (b, _) in &t.acquired[..i] {
                assert!((a.values()[0] - b.values()[0]).abs() >= DUPLICATE_TOLERANCE);
            }
        }
    }

    #[test]
    fn non_finite_target_aborts_with_partial_trace() {
        let mut n = 0;
        let mut f = |_: &HyperparameterVector| {
            n += 1;
            if n == 4 {
                f64::NAN
            } else {
                0.5
            }
        };
        match run_bho(&mut f, &line(), &uniform_init(2, 0), 6, &cheap_acq(0), "uniform") {
            Err(BhoError::NonFiniteTarget { evaluation, partial, .. }) => {
                assert_eq!(evaluation, 4);
                assert_eq!(partial.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run_bho(&mut quad, &line(), &[], 5, &cheap_acq(0), "x").is_err());
        assert!(run_bho(&mut quad, &line(), &uniform_init(4, 0), 3, &cheap_acq(0), "x").is_err());
        let outside = vec![HyperparameterVector::new(vec![1.5])];
        assert!(run_bho(&mut quad, &line(), &outside, 3, &cheap_acq(0), "x").is_err());
    }

    #[test]
    fn csv_layout() {
        let t = run_bho(&mut quad, &line(), &uniform_init(2, 0), 3, &cheap_acq(7), "latin").unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,theta_1,error,best_so_far,method,seed,phase");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,") && lines[1].ends_with(",latin,7,init"));
        assert!(lines[3].ends_with(",bo"));
    }

    fn mean_store() -> HistoryStore {
        let space = line();
        let grid = EvaluationGrid::new(space, (0..5).map(|i| HyperparameterVector::new(vec![i as f64 / 4.0])).collect()).unwrap();
        let records = (0..6)
            .map(|r| {
                let c = r as f64;
                let rows = vec![vec![c, 0.0], vec![c + 0.5, 1.0], vec![c - 0.5, -1.0]];
                let mut errors = vec![0.6; 5];
                errors[r % 5] = 0.1;
                DatasetRecord {
                    id: format!("r{r}"),
                    fraction: 1.0,
                    parent: None,
                    errors,
                    instances: InstanceSet::from_rows(rows, vec![0, 1, 0]).unwrap(),
                }
            })
            .collect();
        let store = HistoryStore::new(grid, records).unwrap();
        MetaFeatureTable::compute(&InstanceMeanEmbedder, &store, 10, 0).unwrap().attach(store).unwrap()
    }

    #[test]
    fn warm_start_retrieves_grid_best_of_neighbours() {
        let store = mean_store();
        let exact = warm_start_init(&InstanceMeanEmbedder, &store, &store.records()[2].instances, 1, 10, 0).unwrap();
        assert_eq!(exact, vec![store.best_on_grid("r2").unwrap().clone()]);

        // query mean sits at 3.2: nearest are r3, r4, r2
        let q = InstanceSet::from_rows(vec![vec![3.2, 0.0]], vec![0]).unwrap();
        let init = warm_start_init(&InstanceMeanEmbedder, &store, &q, 3, 10, 0).unwrap();
        let expect: Vec<_> = ["r3", "r4", "r2"].iter().map(|id| store.best_on_grid(id).unwrap().clone()).collect();
        assert_eq!(init, expect);
        assert!(init.iter().all(|v| store.grid().points().contains(v)));
    }

    #[test]
    fn warm_and_plain_loops_agree_on_equal_inits() {
        let store = mean_store();
        let q = InstanceSet::from_rows(vec![vec![3.2, 0.0]], vec![0]).unwrap();
        let warm = WarmStart { embedder: &InstanceMeanEmbedder, store: &store, tau: 10, seed: 0, k: 3 };
        let acq = AcquisitionConfig { kind: AcquisitionKind::Ucb, ..cheap_acq(5) };
        let a = run_warm_bho(&warm, &q, &mut quad, &line(), 7, &acq).unwrap();
        let init = warm_start_init(&InstanceMeanEmbedder, &store, &q, 3, 10, 0).unwrap();
        let b = run_bho(&mut quad, &line(), &init, 7, &acq, "warmstart").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, "warmstart");

        let only = run_warm_bho(&warm, &q, &mut quad, &line(), 3, &acq).unwrap();
        assert_eq!(only.acquired.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(), init);
    }
}
