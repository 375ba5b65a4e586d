//! Independent reference computations for retrieval, acquisition maximization
//! and the synthetic benchmark's construction properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use warmbo::acquisition::{maximize_in_unit_cube, AcquisitionConfig, AcquisitionKind};
use warmbo::bho::warm_start_init;
use warmbo::gp::{GpModel, KernelParams};
use warmbo::history::{DatasetRecord, EvaluationGrid, HistoryStore, InstanceSet};
use warmbo::hyperspace::{HyperparameterSpace, HyperparameterVector};
use warmbo::metafeature::{InstanceMeanEmbedder, MetaFeatureTable};
use warmbo::synthbench::{make_collection, CollectionSpec, ERROR_FLOOR};

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn ei(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma <= 0.0 {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    (best - mu) * normal_cdf(z) + sigma * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn maximizer_beats_a_dense_grid_search() {
    let mut g = ChaCha8Rng::seed_from_u64(11);
    let space = HyperparameterSpace::unit_cube(2).unwrap();
    for trial in 0..5 {
        let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![g.random(), g.random()]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x[0] - 0.3).powi(2) + (x[1] - 0.7).powi(2) + 0.05 * g.random::<f64>()).collect();
        let model = GpModel::condition(xs, ys.clone(), KernelParams::new(vec![0.3, 0.4], 0.5, 1e-4).unwrap()).unwrap();
        let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let cfg = AcquisitionConfig { seed: trial, ..AcquisitionConfig::new(AcquisitionKind::Ei) };
        let found = maximize_in_unit_cube(&model, &space, &cfg).unwrap();

        let score = |x: &[f64]| {
            let p = model.posterior(x).unwrap();
            ei(p.mean, p.variance.sqrt(), best)
        };
        let steps = 200;
        let grid_best = (0..=steps)
            .flat_map(|i| (0..=steps).map(move |j| [i as f64 / steps as f64, j as f64 / steps as f64]))
            .map(|x| score(&x))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((found.value - score(&found.point)).abs() <= 1e-12 * found.value.abs().max(1.0));
        assert!(found.value >= grid_best - 1e-9, "trial {trial}: {} < grid {grid_best}", found.value);
    }
}

fn line_store(k: usize, seed: u64) -> HistoryStore {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let space = HyperparameterSpace::unit_cube(1).unwrap();
    let points: Vec<HyperparameterVector> = (0..7).map(|i| HyperparameterVector::new(vec![i as f64 / 6.0])).collect();
    let grid = EvaluationGrid::new(space, points).unwrap();
    let records = (0..k)
        .map(|r| {
            let rows = (0..12).map(|_| vec![g.random_range(-3.0..3.0), g.random_range(-3.0..3.0)]).collect();
            DatasetRecord {
                id: format!("r{r}"),
                fraction: 1.0,
                parent: None,
                errors: (0..7).map(|_| g.random_range(0.1..0.9)).collect(),
                instances: InstanceSet::from_rows(rows, vec![0; 12]).unwrap(),
            }
        })
        .collect();
    HistoryStore::new(grid, records).unwrap()
}

#[test]
fn warm_start_matches_brute_force_retrieval() {
    let store = line_store(15, 3);
    let tau = 100;
    let table = MetaFeatureTable::compute(&InstanceMeanEmbedder, &store, tau, 0).unwrap();
    let store = table.attach(store).unwrap();
    let mean = |s: &InstanceSet| -> Vec<f64> {
        let mut m = vec![0.0; s.dim()];
        for row in s.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b / s.len() as f64;
            }
        }
        m
    };
    let mut g = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let rows: Vec<Vec<f64>> = (0..12).map(|_| vec![g.random_range(-3.0..3.0), g.random_range(-3.0..3.0)]).collect();
        let query = InstanceSet::from_rows(rows, vec![0; 12]).unwrap();
        let q = mean(&query);
        let mut ranked: Vec<(f64, usize)> = store
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let m = mean(&r.instances);
                ((m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2), i)
            })
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<HyperparameterVector> = ranked[..4]
            .iter()
            .map(|&(_, i)| {
                let e = &store.records()[i].errors;
                let arg = (0..e.len()).fold(0, |b, s| if e[s] < e[b] { s } else { b });
                store.grid().points()[arg].clone()
            })
            .collect();
        let got = warm_start_init(&InstanceMeanEmbedder, &store, &query, 4, tau, 0).unwrap();
        assert_eq!(got, expected);
    }
}

#[test]
fn default_collection_construction_properties() {
    let space = HyperparameterSpace::canonical_cnn();
    let spec = CollectionSpec::default();
    let c = make_collection(&spec, &space).unwrap();
    let store = &c.store;
    assert_eq!(store.len(), spec.family_count * spec.fractions.len());
    assert_eq!(store.grid().len(), spec.grid_size);
    assert_eq!(c.held_out.len(), spec.held_out);
    for t in &c.held_out {
        assert!(store.index_of(&t.id).is_err(), "{} leaked into the store", t.id);
    }
    for r in store.records() {
        assert!(r.errors.iter().all(|e| (ERROR_FLOOR..=1.0).contains(e)), "{}", r.id);
    }

    let family = |i: usize| store.records()[i].parent.clone().unwrap();
    let k = store.len();
    let (mut within, mut cross) = (Vec::new(), Vec::new());
    for i in 0..k {
        for j in i + 1..k {
            let d = store.target_distance_at(i, j);
            if family(i) == family(j) { within.push(d) } else { cross.push(d) }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = avg(&cross) / avg(&within);
    assert!(ratio >= 1.5, "separation ratio {ratio}");

    // for every anchor variant, a variant further away in fraction is further away in target distance
    let (mut ordered, mut total) = (0usize, 0usize);
    for a in 0..k {
        for b in 0..k {
            for c2 in 0..k {
                let fam = family(a);
                if family(b) != fam || family(c2) != fam || a == b || a == c2 {
                    continue;
                }
                let fa = store.records()[a].fraction;
                let (gb, gc) = ((store.records()[b].fraction - fa).abs(), (store.records()[c2].fraction - fa).abs());
                if gb < gc {
                    total += 1;
                    if store.target_distance_at(a, b) < store.target_distance_at(a, c2) {
                        ordered += 1;
                    }
                }
            }
        }
    }
    let share = ordered as f64 / total as f64;
    assert!(share >= 0.9, "monotone in {ordered}/{total} comparisons");
}
