//! Gaussian-process surrogate with an ARD Matérn 5/2 kernel.
//!
//! Inputs live in the unit cube. Targets are mean-centered before
//! conditioning and the mean is added back in [`GpModel::posterior`].
//! Kernel hyperparameters are chosen by maximizing the log marginal
//! likelihood with a derivative-free search: a Halton batch of starting points
//! over the log-parameter box, each refined by cyclic coordinate-wise
//! golden-section search under a fixed evaluation budget.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal jitter tried in order when the Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("Cholesky factorization failed even with jitter {max_jitter:e}")]
    Numerical { max_jitter: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self, GpError> {
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(GpError::InvalidParams("lengthscales must be positive and finite".into()));
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(GpError::InvalidParams("signal variance must be positive".into()));
        }
        if !(noise_variance.is_finite() && noise_variance >= 0.0) {
            return Err(GpError::InvalidParams("noise variance must be non-negative".into()));
        }
        Ok(Self { lengthscales, signal_variance, noise_variance })
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

#[inline]
fn matern52(x: &[f64], y: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(y)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let t = (a - b) / l;
            t * t
        })
        .sum();
    let r = r2.sqrt();
    signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// `σ_f² (1 + √5 r + 5r²/3) exp(−√5 r)` with `r² = Σ (x_i − x'_i)² / ℓ_i²`.
pub fn matern52_ard(x: &[f64], x_prime: &[f64], params: &KernelParams) -> Result<f64, GpError> {
    if x.len() != x_prime.len() {
        return Err(GpError::DimensionMismatch { expected: x.len(), got: x_prime.len() });
    }
    if x.len() != params.dim() {
        return Err(GpError::DimensionMismatch { expected: params.dim(), got: x.len() });
    }
    Ok(matern52(x, x_prime, &params.lengthscales, params.signal_variance))
}

/// Search box for marginal-likelihood maximization, in natural units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self { lengthscale: (1e-2, 1e1), signal_variance: (1e-4, 1e2), noise_variance: (1e-8, 1e-1) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub bounds: ParamBounds,
    pub starts: usize,
    pub evals_per_start: usize,
    /// Offsets the Halton batch of starting points.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { bounds: ParamBounds::default(), starts: 8, evals_per_start: 200, seed: 0 }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A GP conditioned on data, with its Cholesky factor and weight vector cached.
#[derive(Clone, Debug)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    target_mean: f64,
    params: KernelParams,
    jitter: f64,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Serializable snapshot of a model for debugging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpDump {
    pub params: KernelParams,
    pub jitter: f64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub log_marginal_likelihood: f64,
}

fn check_data(inputs: &[Vec<f64>], targets: &[f64], dim: usize) -> Result<(), GpError> {
    if inputs.is_empty() {
        return Err(GpError::Data("at least one observation is required".into()));
    }
    if inputs.len() != targets.len() {
        return Err(GpError::Data(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != dim) {
        return Err(GpError::DimensionMismatch { expected: dim, got: x.len() });
    }
    if inputs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GpError::Data("inputs must be finite".into()));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Data("targets must be finite".into()));
    }
    Ok(())
}

fn gram(inputs: &[Vec<f64>], params: &KernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance + params.noise_variance;
        for j in 0..i {
            let v = matern52(&inputs[i], &inputs[j], &params.lengthscales, params.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    for &jitter in &JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    Err(GpError::Numerical { max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
}

impl GpModel {
    /// Conditions a GP with fixed kernel parameters on `(inputs, targets)`.
    pub fn condition(inputs: Vec<Vec<f64>>, targets: Vec<f64>, params: KernelParams) -> Result<Self, GpError> {
        check_data(&inputs, &targets, params.dim())?;
        let target_mean = targets.iter().sum::<f64>() / targets.len() as f64;
        let centered = DVector::from_iterator(targets.len(), targets.iter().map(|y| y - target_mean));
        let (factor, jitter) = factorize(gram(&inputs, &params))?;
        let alpha = factor.solve(&centered);
        Ok(Self { inputs, targets, target_mean, params, jitter, factor, alpha })
    }

    /// Fits kernel hyperparameters by maximizing the log marginal likelihood
    /// and returns the model conditioned on the winning parameters.
    pub fn fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, cfg: &FitConfig) -> Result<Self, GpError> {
        let dim = inputs.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(GpError::Data("inputs must be non-empty vectors".into()));
        }
        check_data(&inputs, &targets, dim)?;
        let best = maximize_lml(&inputs, &targets, dim, cfg)?;
        Self::condition(inputs, targets, best)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    /// Diagonal jitter the factorization needed on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Lower-triangular `L` with `L Lᵀ = K + (noise + jitter) I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// `α = (K + noise·I)⁻¹ (y − ȳ)`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `−½ yᵀα − Σ log L_ii − (n/2) log 2π` on the centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.targets.len() as f64;
        let fit: f64 = self.targets.iter().zip(self.alpha.iter()).map(|(y, a)| (y - self.target_mean) * a).sum();
        let l = self.factor.l_dirty();
        let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        -0.5 * fit - log_det - 0.5 * n * LN_2PI
    }

    /// Posterior mean and variance at `x`, variance clamped at zero.
    pub fn posterior(&self, x: &[f64]) -> Result<Prediction, GpError> {
        if x.len() != self.dim() {
            return Err(GpError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let (mean, variance) = self.posterior_unclamped(x);
        Ok(Prediction { mean, variance: variance.max(0.0) })
    }

    pub(crate) fn posterior_unclamped(&self, x: &[f64]) -> (f64, f64) {
        let ls = &self.params.lengthscales;
        let sf2 = self.params.signal_variance;
        let k_star = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| matern52(x, xi, ls, sf2)));
        let mean = k_star.dot(&self.alpha) + self.target_mean;
        let v = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has a positive diagonal");
        (mean, sf2 - v.norm_squared())
    }

    pub fn dump(&self) -> GpDump {
        GpDump {
            params: self.params.clone(),
            jitter: self.jitter,
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
            log_marginal_likelihood: self.log_marginal_likelihood(),
        }
    }
}

/// Log-space search box: `d` lengthscales, then signal and noise variance.
fn log_box(bounds: &ParamBounds, dim: usize) -> Result<Vec<(f64, f64)>, GpError> {
    let pairs = std::iter::repeat_n(bounds.lengthscale, dim)
        .chain([bounds.signal_variance, bounds.noise_variance]);
    pairs
        .map(|(lo, hi)| {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(GpError::InvalidParams(format!("bad search bounds [{lo}, {hi}]")));
            }
            Ok((lo.ln(), hi.ln()))
        })
        .collect()
}

fn params_from_log(theta: &[f64]) -> KernelParams {
    let d = theta.len() - 2;
    KernelParams {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[d].exp(),
        noise_variance: theta[d + 1].exp(),
    }
}

struct LmlObjective<'a> {
    inputs: &'a [Vec<f64>],
    centered: DVector<f64>,
    evals: usize,
}

impl LmlObjective<'_> {
    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evals += 1;
        let params = params_from_log(theta);
        let Ok((factor, _)) = factorize(gram(self.inputs, &params)) else {
            return f64::NEG_INFINITY;
        };
        let alpha = factor.solve(&self.centered);
        let l = factor.l_dirty();
        let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        let v = -0.5 * self.centered.dot(&alpha) - log_det - 0.5 * self.centered.len() as f64 * LN_2PI;
        if v.is_finite() { v } else { f64::NEG_INFINITY }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_895;
const EVALS_PER_LINE_SEARCH: usize = 8;

/// Golden-section maximization of `f` over `[lo, hi]` along coordinate `c`,
/// updating `best` whenever a strictly better point is seen.
fn golden_line_search(
    obj: &mut LmlObjective<'_>,
    best: &mut (Vec<f64>, f64),
    c: usize,
    (mut lo, mut hi): (f64, f64),
    budget: usize,
) {
    let mut probe = best.0.clone();
    let mut eval_at = |obj: &mut LmlObjective<'_>, best: &mut (Vec<f64>, f64), x: f64| {
        probe[c] = x;
        let v = obj.eval(&probe);
        if v > best.1 {
            *best = (probe.clone(), v);
        }
        v
    };
    if budget < 2 {
        return;
    }
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = eval_at(obj, best, x1);
    let mut f2 = eval_at(obj, best, x2);
    for _ in 2..budget {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = eval_at(obj, best, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = eval_at(obj, best, x2);
        }
    }
}

fn maximize_lml(inputs: &[Vec<f64>], targets: &[f64], dim: usize, cfg: &FitConfig) -> Result<KernelParams, GpError> {
    let bounds = log_box(&cfg.bounds, dim)?;
    let p = bounds.len();
    let starts = cfg.starts.max(1);
    let unit_starts = if p <= sampling::PRIMES.len() {
        sampling::halton(p, starts, 1 + (cfg.seed % 1_000_003) * starts as u64)
    } else {
        sampling::latin_hypercube(p, starts, cfg.seed)
    }
    .expect("start batch sizes are positive")
    .points;

    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let mut obj = LmlObjective {
        inputs,
        centered: DVector::from_iterator(targets.len(), targets.iter().map(|y| y - mean)),
        evals: 0,
    };

    let mut overall: Option<(Vec<f64>, f64)> = None;
    for u in unit_starts {
        let start: Vec<f64> = u.iter().zip(&bounds).map(|(t, (lo, hi))| lo + t * (hi - lo)).collect();
        obj.evals = 0;
        let v0 = obj.eval(&start);
        let mut best = (start, v0);
        let mut sweep = 0;
        'refine: loop {
            for (c, &(lo, hi)) in bounds.iter().enumerate() {
                let remaining = cfg.evals_per_start.saturating_sub(obj.evals);
                if remaining < 2 {
                    break 'refine;
                }
                // the bracket halves every sweep, centred on the incumbent
                let half = (hi - lo) * 0.5f64.powi(sweep);
                let bracket = ((best.0[c] - half).max(lo), (best.0[c] + half).min(hi));
                if bracket.1 - bracket.0 <= f64::EPSILON {
                    continue;
                }
                golden_line_search(&mut obj, &mut best, c, bracket, remaining.min(EVALS_PER_LINE_SEARCH));
            }
            sweep += 1;
        }
        if overall.as_ref().is_none_or(|o| best.1 > o.1) {
            overall = Some(best);
        }
    }
    match overall {
        Some((theta, v)) if v.is_finite() => Ok(params_from_log(&theta)),
        _ => Err(GpError::Numerical { max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] }),
    }
}
