//! Acquisition functions (expected improvement and GP-UCB) and their
//! maximization over the unit cube.
//!
//! Both criteria are written for minimization of the target: the incumbent is
//! the lowest observed error and larger acquisition values are better.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::gp::{GpError, GpModel};
use crate::hyperspace::{DimensionKind, HyperparameterSpace, HyperparameterVector, SpaceError};
use crate::rng::{self, Stream};
use crate::sampling;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const PATTERN_INITIAL_STEP: f64 = 0.1;
const PATTERN_FINAL_STEP: f64 = 1e-4;
const PATTERN_MAX_EVALS: usize = 20_000;
const JITTER_STD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(String),
    #[error("unknown acquisition '{0}' (expected 'ei' or 'ucb')")]
    UnknownKind(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Standard normal CDF through the complementary error function, accurate in
/// both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// `E[max(0, best − Y)]` for `Y ~ N(mu, sigma²)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let gap = best - mu;
    if sigma <= 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    (gap * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// `−mu + kappa·sigma`.
pub fn gp_ucb(mu: f64, sigma: f64, kappa: f64) -> f64 {
    -mu + kappa * sigma
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Ei,
    Ucb,
}

impl AcquisitionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AcquisitionKind::Ei => "ei",
            AcquisitionKind::Ucb => "ucb",
        }
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionKind {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ei" => Ok(AcquisitionKind::Ei),
            "ucb" => Ok(AcquisitionKind::Ucb),
            _ => Err(AcquisitionError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    /// Exploration weight, UCB only.
    pub kappa: f64,
    /// Candidates scored before local refinement.
    pub maximizer_budget: usize,
    /// Pattern-search refinements, started from the best candidates.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { kind: AcquisitionKind::Ei, kappa: 2.0, maximizer_budget: 2048, restarts: 4, seed: 0 }
    }
}

impl AcquisitionConfig {
    pub fn new(kind: AcquisitionKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AcquisitionError> {
        if self.kind == AcquisitionKind::Ucb && !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(AcquisitionError::InvalidConfig(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if self.maximizer_budget == 0 {
            return Err(AcquisitionError::InvalidConfig("maximizer budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores unit-cube points against one fitted model.
pub struct Acquisition<'a> {
    model: &'a GpModel,
    kind: AcquisitionKind,
    kappa: f64,
    incumbent: f64,
}

impl<'a> Acquisition<'a> {
    pub fn new(model: &'a GpModel, cfg: &AcquisitionConfig) -> Self {
        let incumbent = model.targets().iter().copied().fold(f64::INFINITY, f64::min);
        Self { model, kind: cfg.kind, kappa: cfg.kappa, incumbent }
    }

    /// Lowest observed target.
    pub fn incumbent(&self) -> f64 {
        self.incumbent
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, AcquisitionError> {
        let p = self.model.posterior(x)?;
        Ok(match self.kind {
            AcquisitionKind::Ei => expected_improvement(p.mean, p.std_dev(), self.incumbent),
            AcquisitionKind::Ucb => gp_ucb(p.mean, p.std_dev(), self.kappa),
        })
    }
}

/// Outcome of [`maximize_in_unit_cube`].
#[derive(Clone, Debug)]
pub struct Maximum {
    /// Best point, in normalized coordinates, already snapped to the space.
    pub point: Vec<f64>,
    pub value: f64,
    /// Halton candidates (snapped) ordered by decreasing acquisition value,
    /// ties by generation order.
    pub ranked_halton: Vec<(Vec<f64>, f64)>,
}

/// Unit-cube spacing between neighbouring members of integer-set dims; zero
/// for continuous dims.
fn lattice_steps(space: &HyperparameterSpace) -> Vec<f64> {
    space
        .dims()
        .iter()
        .map(|d| match d.kind() {
            DimensionKind::IntSet(m) => {
                let width = d.upper() - d.lower();
                m.windows(2).map(|w| (w[1] - w[0]) as f64 / width).fold(f64::INFINITY, f64::min)
            }
            _ => 0.0,
        })
        .collect()
}

fn pattern_search<F>(mut x: Vec<f64>, mut fx: f64, min_steps: &[f64], f: &mut F) -> Result<(Vec<f64>, f64), AcquisitionError>
where
    F: FnMut(&[f64]) -> Result<(Vec<f64>, f64), AcquisitionError>,
{
    let mut step = PATTERN_INITIAL_STEP;
    let mut evals = 0;
    while step >= PATTERN_FINAL_STEP && evals < PATTERN_MAX_EVALS {
        let mut improved = false;
        for (i, &min_step) in min_steps.iter().enumerate() {
            let s = step.max(min_step);
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] = (x[i] + dir * s).clamp(0.0, 1.0);
                if y[i] == x[i] {
                    continue;
                }
                let (y, fy) = f(&y)?;
                evals += 1;
                if fy > fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((x, fx))
}

/// Scores a Halton batch plus Gaussian perturbations of the incumbent, then
/// refines the top `restarts` candidates by coordinate pattern search with
/// steps halving from 0.1 to 1e-4. Every evaluated point is first snapped
/// onto the space, so the returned point is exactly representable.
pub fn maximize_in_unit_cube(
    model: &GpModel,
    space: &HyperparameterSpace,
    cfg: &AcquisitionConfig,
) -> Result<Maximum, AcquisitionError> {
    cfg.validate()?;
    let d = space.dim_count();
    if model.dim() != d {
        return Err(GpError::DimensionMismatch { expected: d, got: model.dim() }.into());
    }
    let acq = Acquisition::new(model, cfg);
    let mut score = |u: &[f64]| -> Result<(Vec<f64>, f64), AcquisitionError> {
        let snapped = space.snap_unit(u)?;
        let v = acq.value(&snapped)?;
        Ok((snapped, v))
    };

    let jitter_count = if cfg.maximizer_budget >= 8 { cfg.maximizer_budget / 8 } else { 0 };
    let halton_count = cfg.maximizer_budget - jitter_count;
    let mut candidates: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cfg.maximizer_budget);
    if halton_count > 0 {
        let start = 1 + (cfg.seed % 1_000_003) * halton_count as u64;
        let batch = if d <= sampling::PRIMES.len() {
            sampling::halton(d, halton_count, start)
        } else {
            sampling::latin_hypercube(d, halton_count, cfg.seed)
        }
        .expect("candidate counts are positive");
        for u in batch.points {
            candidates.push(score(&u)?);
        }
    }
    let mut ranked_halton: Vec<(usize, f64)> = candidates.iter().map(|c| c.1).enumerate().collect();
    ranked_halton.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let ranked_halton: Vec<(Vec<f64>, f64)> =
        ranked_halton.into_iter().map(|(i, v)| (candidates[i].0.clone(), v)).collect();

    if jitter_count > 0 {
        let incumbent_idx = model
            .targets()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
            .expect("model has observations");
        let centre = model.inputs()[incumbent_idx].clone();
        let normal = Normal::new(0.0, JITTER_STD).expect("valid std");
        let mut rng = rng::stream(cfg.seed, Stream::AcquisitionJitter);
        for _ in 0..jitter_count {
            let u: Vec<f64> = centre.iter().map(|c| (c + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            candidates.push(score(&u)?);
        }
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
    let (mut best_point, mut best_value) = candidates[order[0]].clone();

    let min_steps = lattice_steps(space);
    let mut started: Vec<&Vec<f64>> = Vec::new();
    for &i in &order {
        if started.len() >= cfg.restarts {
            break;
        }
        let (x, fx) = &candidates[i];
        if started.contains(&x) {
            continue;
        }
        started.push(x);
        let (y, fy) = pattern_search(x.clone(), *fx, &min_steps, &mut score)?;
        if fy > best_value {
            best_point = y;
            best_value = fy;
        }
    }
    Ok(Maximum { point: best_point, value: best_value, ranked_halton })
}

/// `argmax_θ a(θ | model)` over `space`, returned in raw units.
pub fn maximize_acquisition(
    model: &GpModel,
    space: &HyperparameterSpace,
    cfg: &AcquisitionConfig,
) -> Result<HyperparameterVector, AcquisitionError> {
    let best = maximize_in_unit_cube(model, space, cfg)?;
    Ok(space.denormalize(&best.point)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelParams;

    #[test]
    fn ei_at_zero_gap() {
        assert!((expected_improvement(0.7, 1.0, 0.7) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn ei_deterministic_limit() {
        assert!((expected_improvement(0.4, 0.0, 1.0) - 0.6).abs() < 1e-15);
        assert_eq!(expected_improvement(1.4, 0.0, 1.0), 0.0);
        for (mu, best) in [(0.4f64, 1.0f64), (0.3, 0.3), (1.2, 1.0)] {
            let limit = (best - mu).max(0.0);
            assert!((expected_improvement(mu, 1e-8, best) - limit).abs() < 1e-6);
        }
    }

    #[test]
    fn ei_reference_value() {
        // 0.2 Φ(1) + 0.2 φ(1)
        let v = expected_improvement(0.3, 0.2, 0.5);
        assert!((v - 0.216_666).abs() < 1e-5, "{v}");
    }

    #[test]
    fn cdf_is_accurate_in_tails() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        // Φ(−8) = 6.220960574271785e-16
        let tail = normal_cdf(-8.0);
        assert!((tail - 6.220_960_574_271_784e-16).abs() < 1e-14 * 6.2e-16, "{tail:e}");
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-13);
    }

    #[test]
    fn ei_is_monotone_in_sigma() {
        for mu in [0.2, 0.5] {
            let mut prev = 0.0;
            for i in 0..200 {
                let s = i as f64 * 0.01;
                let v = expected_improvement(mu, s, 0.5);
                assert!(v >= prev - 1e-15);
                assert!(v >= 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn ucb_examples() {
        assert!((gp_ucb(0.3, 0.2, 2.0) - 0.1).abs() < 1e-15);
        assert_eq!(gp_ucb(0.3, 0.2, 0.0), -0.3);
        assert_eq!(gp_ucb(0.3, 0.0, 7.0), -0.3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AcquisitionConfig::new(AcquisitionKind::Ucb);
        cfg.kappa = -1.0;
        assert!(cfg.validate().is_err());
        cfg.kappa = 0.0;
        cfg.maximizer_budget = 0;
        assert!(cfg.validate().is_err());
        assert_eq!("UCB".parse::<AcquisitionKind>().unwrap(), AcquisitionKind::Ucb);
        assert!("pi".parse::<AcquisitionKind>().is_err());
    }

    fn toy_model() -> GpModel {
        let xs = vec![vec![0.2, 0.3], vec![0.7, 0.8], vec![0.5, 0.1], vec![0.9, 0.4]];
        let ys = vec![0.4, 0.2, 0.6, 0.3];
        GpModel::condition(xs, ys, KernelParams::new(vec![0.3, 0.3], 0.05, 1e-6).unwrap()).unwrap()
    }

    #[test]
    fn maximizer_beats_every_candidate_and_is_deterministic() {
        let space = HyperparameterSpace::unit_cube(2).unwrap();
        let m = toy_model();
        for kind in [AcquisitionKind::Ei, AcquisitionKind::Ucb] {
            let cfg = AcquisitionConfig { kind, maximizer_budget: 256, seed: 11, ..Default::default() };
            let a = maximize_in_unit_cube(&m, &space, &cfg).unwrap();
            let b = maximize_in_unit_cube(&m, &space, &cfg).unwrap();
            assert_eq!(a.point, b.point);
            assert!(a.ranked_halton.iter().all(|(_, v)| *v <= a.value));
            let acq = Acquisition::new(&m, &cfg);
            assert_eq!(acq.value(&a.point).unwrap(), a.value);
        }
    }

    #[test]
    fn ucb_without_exploration_minimizes_mean() {
        let space = HyperparameterSpace::unit_cube(2).unwrap();
        let m = toy_model();
        let cfg = AcquisitionConfig { kind: AcquisitionKind::Ucb, kappa: 0.0, maximizer_budget: 512, ..Default::default() };
        let best = maximize_in_unit_cube(&m, &space, &cfg).unwrap();
        let mu = m.posterior(&best.point).unwrap().mean;
        for (c, _) in &best.ranked_halton {
            assert!(mu <= m.posterior(c).unwrap().mean + 1e-15);
        }
    }

    #[test]
    fn integer_dims_come_back_as_members() {
        let space = HyperparameterSpace::canonical_cnn();
        let xs = vec![vec![0.1, 0.5, 0.5, 0.25, 0.5, 0.3], vec![0.6, 0.2, 0.1, 0.75, 0.0, 0.8]];
        let m = GpModel::condition(xs, vec![0.5, 0.3], KernelParams::new(vec![0.5; 6], 0.1, 1e-6).unwrap()).unwrap();
        let v = maximize_acquisition(&m, &space, &AcquisitionConfig { maximizer_budget: 128, ..Default::default() }).unwrap();
        assert_eq!(space.validate(&v), Ok(true));
    }
}
