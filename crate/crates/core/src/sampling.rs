//! Baseline initial designs on the unit cube: i.i.d. uniform, Latin
//! hypercube, and the (unscrambled) Halton sequence.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

/// The first 25 primes; Halton dimension `i` uses base `PRIMES[i]`.
pub const PRIMES: [u64; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("invalid sampling request: {0}")]
    Domain(String),
    #[error("Halton sequence supports at most {max} dimensions, got {d}")]
    UnsupportedDimension { d: usize, max: usize },
    #[error("unknown sampling method '{0}'")]
    UnknownMethod(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Uniform,
    Latin,
    Halton,
}

impl SampleMethod {
    pub const ALL: [SampleMethod; 3] = [SampleMethod::Uniform, SampleMethod::Latin, SampleMethod::Halton];

    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMethod::Uniform => "uniform",
            SampleMethod::Latin => "latin",
            SampleMethod::Halton => "halton",
        }
    }
}

impl fmt::Display for SampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleMethod {
    type Err = SamplingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(SampleMethod::Uniform),
            "latin" => Ok(SampleMethod::Latin),
            "halton" => Ok(SampleMethod::Halton),
            other => Err(SamplingError::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub points: Vec<Vec<f64>>,
    /// The generator seed, or the start index for Halton batches.
    pub seed: u64,
    pub method: SampleMethod,
}

fn check_counts(d: usize, k: usize) -> Result<(), SamplingError> {
    if d == 0 {
        return Err(SamplingError::Domain("dimension count must be at least 1".into()));
    }
    if k == 0 {
        return Err(SamplingError::Domain("point count must be at least 1".into()));
    }
    Ok(())
}

/// `k` i.i.d. uniform points on `[0,1)^d`.
pub fn uniform_sample(d: usize, k: usize, seed: u64) -> Result<SampleBatch, SamplingError> {
    check_counts(d, k)?;
    let mut rng = rng::stream(seed, Stream::InitialDesign);
    let points = (0..k).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
    Ok(SampleBatch { points, seed, method: SampleMethod::Uniform })
}

/// Latin hypercube: in every dimension each stratum `[j/k, (j+1)/k)` holds
/// exactly one point, with strata assigned by an independent permutation per
/// dimension and a uniform offset inside the stratum.
pub fn latin_hypercube(d: usize, k: usize, seed: u64) -> Result<SampleBatch, SamplingError> {
    check_counts(d, k)?;
    let mut rng = rng::stream(seed, Stream::InitialDesign);
    let mut points = vec![vec![0.0; d]; k];
    let kf = k as f64;
    let mut strata: Vec<usize> = (0..k).collect();
    for dim in 0..d {
        strata.shuffle(&mut rng);
        for (point, &j) in points.iter_mut().zip(&strata) {
            let mut x = (j as f64 + rng.random::<f64>()) / kf;
            // rounding in the division can push x across a stratum edge
            while (x * kf).floor() as usize > j || x >= 1.0 {
                x = x.next_down();
            }
            while ((x * kf).floor() as usize) < j {
                x = x.next_up();
            }
            point[dim] = x;
        }
    }
    Ok(SampleBatch { points, seed, method: SampleMethod::Latin })
}

/// Radical inverse of `index` in `base`, rounded once from the exact fraction.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let (mut numerator, mut denominator) = (0u64, 1u64);
    while index > 0 {
        numerator = numerator * base + index % base;
        denominator *= base;
        index /= base;
    }
    numerator as f64 / denominator as f64
}

/// Halton points `start_index, …, start_index + k − 1`; coordinate `i` uses
/// the `i`-th prime as base.
pub fn halton(d: usize, k: usize, start_index: u64) -> Result<SampleBatch, SamplingError> {
    check_counts(d, k)?;
    if d > PRIMES.len() {
        return Err(SamplingError::UnsupportedDimension { d, max: PRIMES.len() });
    }
    if start_index == 0 {
        return Err(SamplingError::Domain("Halton start index must be at least 1".into()));
    }
    let points = (0..k as u64)
        .map(|j| PRIMES[..d].iter().map(|&p| radical_inverse(start_index + j, p)).collect())
        .collect();
    Ok(SampleBatch { points, seed: start_index, method: SampleMethod::Halton })
}

/// Dispatches on `method`; Halton batches ignore `seed` and start at index 1.
pub fn sample(method: SampleMethod, d: usize, k: usize, seed: u64) -> Result<SampleBatch, SamplingError> {
    match method {
        SampleMethod::Uniform => uniform_sample(d, k, seed),
        SampleMethod::Latin => latin_hypercube(d, k, seed),
        SampleMethod::Halton => halton(d, k, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strata_of(batch: &SampleBatch, dim: usize) -> Vec<usize> {
        let k = batch.points.len() as f64;
        let mut s: Vec<usize> = batch.points.iter().map(|p| (p[dim] * k).floor() as usize).collect();
        s.sort_unstable();
        s
    }

    #[test]
    fn uniform_is_deterministic() {
        assert_eq!(uniform_sample(2, 3, 7).unwrap(), uniform_sample(2, 3, 7).unwrap());
        assert_ne!(uniform_sample(2, 3, 7).unwrap().points, uniform_sample(2, 3, 8).unwrap().points);
    }

    #[test]
    fn uniform_mean_is_one_half() {
        let b = uniform_sample(1, 10_000, 1).unwrap();
        let mean = b.points.iter().map(|p| p[0]).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(uniform_sample(0, 1, 0), Err(SamplingError::Domain(_))));
        assert!(matches!(latin_hypercube(2, 0, 0), Err(SamplingError::Domain(_))));
        assert!(matches!(halton(26, 1, 1), Err(SamplingError::UnsupportedDimension { d: 26, max: 25 })));
        assert!(matches!(halton(1, 1, 0), Err(SamplingError::Domain(_))));
    }

    #[test]
    fn latin_examples() {
        for seed in 0..5 {
            let b = latin_hypercube(1, 4, seed).unwrap();
            let mut xs: Vec<f64> = b.points.iter().map(|p| p[0]).collect();
            xs.sort_by(f64::total_cmp);
            for (j, x) in xs.iter().enumerate() {
                assert!(*x >= j as f64 * 0.25 && *x < (j + 1) as f64 * 0.25);
            }
        }
        let b = latin_hypercube(3, 10, 5).unwrap();
        for dim in 0..3 {
            assert_eq!(strata_of(&b, dim), (0..10).collect::<Vec<_>>());
        }
        let single = latin_hypercube(2, 1, 0).unwrap();
        assert_eq!(single.points.len(), 1);
        assert!(single.points[0].iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn halton_examples() {
        let b = halton(1, 4, 1).unwrap();
        assert_eq!(b.points, vec![vec![0.5], vec![0.25], vec![0.75], vec![0.125]]);
        assert_eq!(halton(2, 1, 1).unwrap().points, vec![vec![0.5, 1.0 / 3.0]]);
        assert_eq!(halton(1, 2, 3).unwrap().points, vec![vec![0.75], vec![0.125]]);
    }

    /// Largest deviation between the empirical mass of an anchored box
    /// `[0,a)×[0,b)` and its volume, over boxes cornered at sample coordinates.
    fn star_discrepancy_2d(points: &[Vec<f64>]) -> f64 {
        let n = points.len() as f64;
        let mut edges: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
        edges.push(1.0);
        let mut worst = 0.0f64;
        for &a in &edges {
            for &b in &edges {
                let open = points.iter().filter(|p| p[0] < a && p[1] < b).count() as f64;
                let closed = points.iter().filter(|p| p[0] <= a && p[1] <= b).count() as f64;
                worst = worst.max((open / n - a * b).abs()).max((closed / n - a * b).abs());
            }
        }
        worst
    }

    #[test]
    fn halton_has_lower_discrepancy_than_uniform() {
        let h = star_discrepancy_2d(&halton(2, 64, 1).unwrap().points);
        let u = (0..20).map(|s| star_discrepancy_2d(&uniform_sample(2, 64, s).unwrap().points)).sum::<f64>() / 20.0;
        assert!(h < u, "halton {h} vs uniform {u}");
    }

    proptest! {
        #[test]
        fn latin_stratification_holds(d in 1usize..=6, k in 1usize..=50, seed in any::<u64>()) {
            let b = latin_hypercube(d, k, seed).unwrap();
            prop_assert_eq!(b.points.len(), k);
            for dim in 0..d {
                prop_assert_eq!(strata_of(&b, dim), (0..k).collect::<Vec<_>>());
            }
        }

        #[test]
        fn coordinates_lie_in_half_open_cube(d in 1usize..=8, k in 1usize..=40, seed in any::<u64>(), start in 1u64..1000) {
            for b in [uniform_sample(d, k, seed).unwrap(), latin_hypercube(d, k, seed).unwrap(), halton(d, k, start).unwrap()] {
                prop_assert!(b.points.iter().flatten().all(|x| (0.0..1.0).contains(x)));
            }
        }

        #[test]
        fn halton_offset_is_a_suffix(d in 1usize..=25, k in 1usize..30, start in 1u64..200) {
            let shifted = halton(d, k, start).unwrap().points;
            let full = halton(d, k + start as usize - 1, 1).unwrap().points;
            prop_assert_eq!(&shifted[..], &full[start as usize - 1..]);
        }
    }
}
