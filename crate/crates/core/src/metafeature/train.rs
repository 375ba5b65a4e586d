//! Distance-matching training of the Siamese wing.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wing::{WingParams, WingShape};
use super::{embed_store, euclidean, subsample_indices, MetaFeatureError};
use crate::history::{HistoryStore, InstanceSet};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Instances subsampled per dataset per pair.
    pub tau: usize,
    pub iterations: usize,
    pub batch_pairs: usize,
    pub step_size: f64,
    /// Step size at iteration `t` is `step_size · exp(−decay · t)`.
    pub decay: f64,
    pub seed: u64,
    /// Unordered record pairs held out of training and scored in `val_loss`.
    pub validation_pairs: usize,
    /// A loss row is written every this many iterations (and at the end).
    pub log_every: usize,
    pub extractor: Vec<usize>,
    pub head: Vec<usize>,
    pub meta_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 200,
            iterations: 2000,
            batch_pairs: 8,
            step_size: 1e-4,
            decay: 1e-3,
            seed: 0,
            validation_pairs: 20,
            log_every: 50,
            extractor: vec![64, 64],
            head: vec![256, 256],
            meta_dim: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaFeatureError> {
        let bad = |m: &str| Err(MetaFeatureError::InvalidConfig(m.into()));
        if self.tau == 0 {
            return bad("tau must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_pairs == 0 {
            return bad("batch_pairs must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) || !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad("step_size and decay must be finite and non-negative");
        }
        Ok(())
    }

    pub fn shape(&self, store: &HistoryStore) -> WingShape {
        let instance_dim = store.records()[0].instances.dim();
        let num_classes = store
            .records()
            .iter()
            .flat_map(|r| r.instances.labels())
            .max()
            .map_or(1, |&m| m as usize + 1);
        WingShape {
            instance_dim,
            num_classes,
            extractor: self.extractor.clone(),
            head: self.head.clone(),
            meta_dim: self.meta_dim,
        }
    }
}

/// Mean pair loss over all training pairs (`train_loss`) and over the held-out
/// pairs (`val_loss`), with every record embedded by a fixed subsample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub wing: WingParams,
    pub trace: Vec<LossRow>,
    /// Mean batch loss at every iteration.
    pub batch_losses: Vec<f64>,
    pub validation_pairs: Vec<(usize, usize)>,
}

impl TrainOutput {
    pub fn write_trace_csv(&self, path: &Path) -> Result<(), MetaFeatureError> {
        let io = |e: csv::Error| MetaFeatureError::Io { path: path.into(), source: e.into() };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["iteration", "train_loss", "val_loss"]).map_err(io)?;
        for r in &self.trace {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.iteration.to_string(), r.train_loss.to_string(), val]).map_err(io)?;
        }
        w.flush().map_err(|source| MetaFeatureError::Io { path: path.into(), source })
    }
}

/// Loss `(d − ‖m_a − m_b‖)²` of one pair and its gradient with respect to every weight.
pub fn pair_gradients(
    w: &WingParams,
    a: &InstanceSet,
    b: &InstanceSet,
    d_target: f64,
) -> Result<(f64, WingParams), MetaFeatureError> {
    let ta = w.forward(a)?;
    let tb = w.forward(b)?;
    let diff: DVector<f64> = ta.output() - tb.output();
    let dist = diff.norm();
    let residual = d_target - dist;
    let mut grads = w.zeros_like();
    // at dist = 0 the distance is not differentiable; the zero subgradient is used
    if dist > 0.0 {
        let d_a = diff * (-2.0 * residual / dist);
        let d_b = -&d_a;
        w.backward(&ta, d_a, &mut grads);
        w.backward(&tb, d_b, &mut grads);
    }
    Ok((residual * residual, grads))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

fn choose_validation(k: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>, MetaFeatureError> {
    let total = k * (k - 1) / 2;
    if count >= total {
        return Err(MetaFeatureError::InvalidConfig(format!(
            "{count} validation pairs would leave none of the {total} pairs for training"
        )));
    }
    let all: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let mut rng = rng::stream(seed, Stream::Validation);
    let picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
    let mut out: Vec<(usize, usize)> = picked.into_iter().map(|p| all[p]).collect();
    out.sort_unstable();
    Ok(out)
}

fn mean_loss(store: &HistoryStore, emb: &[Vec<f64>], pairs: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, j) in pairs {
        let r = store.target_distance_at(i, j) - euclidean(&emb[i], &emb[j]);
        sum += r * r;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Trains a fresh wing on `store`.
pub fn train(store: &HistoryStore, cfg: &TrainConfig) -> Result<TrainOutput, MetaFeatureError> {
    cfg.validate()?;
    let k = store.len();
    if k < 2 {
        return Err(MetaFeatureError::TooFewRecords(k));
    }
    let mut wing = WingParams::init(&cfg.shape(store), cfg.seed)?;
    let validation = choose_validation(k, cfg.validation_pairs, cfg.seed)?;
    let held: HashSet<(usize, usize)> = validation.iter().copied().collect();

    let evaluate = |wing: &WingParams, iteration: usize| -> Result<LossRow, MetaFeatureError> {
        let emb: Vec<Vec<f64>> = embed_store(wing, store, cfg.tau, cfg.seed)?.into_iter().map(|m| m.0).collect();
        let training = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).filter(|p| !held.contains(p));
        let train_loss = mean_loss(store, &emb, training).expect("at least one training pair");
        Ok(LossRow { iteration, train_loss, val_loss: mean_loss(store, &emb, validation.iter().copied()) })
    };

    let mut trace = vec![evaluate(&wing, 0)?];
    let mut batch_losses = Vec::with_capacity(cfg.iterations);
    let mut rng = rng::stream(cfg.seed, Stream::PairSampling);
    let mut adam = Adam::new(wing.param_count());
    for t in 1..=cfg.iterations {
        let mut jobs = Vec::with_capacity(cfg.batch_pairs);
        while jobs.len() < cfg.batch_pairs {
            let i = rng.random_range(0..k);
            let j = rng.random_range(0..k - 1);
            let j = if j >= i { j + 1 } else { j };
            if held.contains(&(i.min(j), i.max(j))) {
                continue;
            }
            jobs.push((i, j, rng.random::<u64>(), rng.random::<u64>()));
        }
        let results = jobs
            .par_iter()
            .map(|&(i, j, si, sj)| {
                let (ri, rj) = (&store.records()[i].instances, &store.records()[j].instances);
                let a = ri.select(&subsample_indices(ri.len(), cfg.tau, si));
                let b = rj.select(&subsample_indices(rj.len(), cfg.tau, sj));
                pair_gradients(&wing, &a, &b, store.target_distance_at(i, j))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // reduce in batch order so the sum does not depend on thread scheduling
        let mut total = wing.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            total.add_assign(g);
        }
        let scale = 1.0 / cfg.batch_pairs as f64;
        loss *= scale;
        if !loss.is_finite() {
            return Err(MetaFeatureError::Divergence { iteration: t });
        }
        batch_losses.push(loss);
        total.scale(scale);

        let lr = cfg.step_size * (-cfg.decay * (t - 1) as f64).exp();
        let mut flat = wing.flatten();
        adam.step(&mut flat, &total.flatten(), lr);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(MetaFeatureError::Divergence { iteration: t });
        }
        wing.assign(&flat);

        if t % cfg.log_every == 0 || t == cfg.iterations {
            let row = evaluate(&wing, t)?;
            if !row.train_loss.is_finite() {
                return Err(MetaFeatureError::Divergence { iteration: t });
            }
            trace.push(row);
        }
    }
    Ok(TrainOutput { wing, trace, batch_losses, validation_pairs: validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{DatasetRecord, EvaluationGrid};
    use crate::hyperspace::{HyperparameterSpace, HyperparameterVector};

    fn toy_store(k: usize, n_inst: usize) -> HistoryStore {
        let space = HyperparameterSpace::unit_cube(1).unwrap();
        let grid = EvaluationGrid::new(space, (0..4).map(|i| HyperparameterVector::new(vec![i as f64 / 3.0])).collect()).unwrap();
        let records = (0..k)
            .map(|r| {
                let s = r as f64 / k as f64;
                let rows = (0..n_inst).map(|i| vec![s + 0.1 * (i as f64).sin(), -s + 0.05 * i as f64, 0.3]).collect();
                DatasetRecord {
                    id: format!("d{r}"),
                    fraction: 1.0,
                    parent: None,
                    errors: (0..4).map(|g| 0.2 + 0.5 * s * (g as f64 / 3.0)).collect(),
                    instances: InstanceSet::from_rows(rows, (0..n_inst).map(|i| (i % 2) as u32).collect()).unwrap(),
                }
            })
            .collect();
        HistoryStore::new(grid, records).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            tau: 4,
            iterations: 3,
            batch_pairs: 2,
            validation_pairs: 1,
            log_every: 1,
            extractor: vec![6],
            head: vec![8],
            meta_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.tau, c.step_size, c.decay), (200, 1e-4, 1e-3));
        assert!(TrainConfig { tau: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..c }.validate().is_err());
    }

    #[test]
    fn needs_two_records() {
        let s = toy_store(1, 4);
        assert!(matches!(train(&s, &small_cfg()), Err(MetaFeatureError::TooFewRecords(1))));
    }

    #[test]
    fn zero_step_keeps_initial_weights() {
        let s = toy_store(4, 5);
        let cfg = TrainConfig { step_size: 0.0, iterations: 1, ..small_cfg() };
        let out = train(&s, &cfg).unwrap();
        assert_eq!(out.wing, WingParams::init(&cfg.shape(&s), cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let s = toy_store(5, 6);
        let a = train(&s, &small_cfg()).unwrap();
        let b = train(&s, &small_cfg()).unwrap();
        assert_eq!(a.wing, b.wing);
        assert_eq!(a.trace, b.trace);
        assert_ne!(a.wing, WingParams::init(&small_cfg().shape(&s), 0).unwrap());
    }

    #[test]
    fn validation_pairs_are_never_trained_on() {
        let s = toy_store(4, 4);
        assert!(train(&s, &TrainConfig { validation_pairs: 6, ..small_cfg() }).is_err());
        let out = train(&s, &TrainConfig { validation_pairs: 5, ..small_cfg() }).unwrap();
        assert_eq!(out.validation_pairs.len(), 5);
        assert!(out.trace.iter().all(|r| r.val_loss.is_some()));
    }

    #[test]
    fn huge_step_reports_divergence() {
        let s = toy_store(4, 4);
        let cfg = TrainConfig { step_size: 1e300, iterations: 5, ..small_cfg() };
        assert!(matches!(train(&s, &cfg), Err(MetaFeatureError::Divergence { .. })));
    }

    #[test]
    fn trace_csv_layout() {
        let s = toy_store(4, 4);
        let out = train(&s, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        out.write_trace_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,train_loss,val_loss");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[1].starts_with("0,"));
    }
}
