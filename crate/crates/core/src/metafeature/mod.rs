//! Learned dataset meta-features.
//!
//! A [`WingParams`] network maps a set of labelled instances to a fixed-length
//! [`MetaFeature`]. Training ([`train`]) fits the network so that Euclidean
//! distances between meta-features match the L1 target distances stored in a
//! [`HistoryStore`]; retrieval ([`knn`]) then ranks stored datasets by
//! meta-feature distance to a new one.

mod train;
mod wing;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{HistoryError, HistoryStore, InstanceSet};
use crate::rng::{self, Stream};

pub use train::{pair_gradients, train, LossRow, TrainConfig, TrainOutput};
pub use wing::{Dense, WingParams, WingShape};

#[derive(Debug, Error)]
pub enum MetaFeatureError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot aggregate an empty feature list")]
    EmptyAggregate,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training needs at least 2 records, the store has {0}")]
    TooFewRecords(usize),
    #[error("training diverged: non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("store has no meta-features attached")]
    MissingMetaFeatures,
    #[error("asked for {k} neighbours but only {available} records exist")]
    TooManyNeighbours { k: usize, available: usize },
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetaFeature(Vec<f64>);

impl MetaFeature {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Componentwise arithmetic mean.
pub fn aggregate_adf(features: &[Vec<f64>]) -> Result<Vec<f64>, MetaFeatureError> {
    let first = features.first().ok_or(MetaFeatureError::EmptyAggregate)?;
    let mut sum = vec![0.0; first.len()];
    for f in features {
        if f.len() != sum.len() {
            return Err(MetaFeatureError::DimensionMismatch { expected: sum.len(), got: f.len() });
        }
        for (s, x) in sum.iter_mut().zip(f) {
            *s += x;
        }
    }
    let n = features.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Euclidean distance.
pub fn mf_distance(a: &MetaFeature, b: &MetaFeature) -> Result<f64, MetaFeatureError> {
    if a.len() != b.len() {
        return Err(MetaFeatureError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(euclidean(a.values(), b.values()))
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(d_target − ‖m_i − m_j‖₂)²`.
pub fn pair_loss(m_i: &MetaFeature, m_j: &MetaFeature, d_target: f64) -> Result<f64, MetaFeatureError> {
    let r = d_target - mf_distance(m_i, m_j)?;
    Ok(r * r)
}

/// The seeded subsample of `min(tau, len)` instance indices, ascending.
pub fn subsample_indices(count: usize, tau: usize, seed: u64) -> Vec<usize> {
    if tau >= count {
        return (0..count).collect();
    }
    let mut rng = rng::stream(seed, Stream::Subsample);
    let mut idx = index::sample(&mut rng, count, tau).into_vec();
    idx.sort_unstable();
    idx
}

/// Anything that turns a dataset's instances into a meta-feature.
pub trait DatasetEmbedder {
    fn embed(&self, instances: &InstanceSet, tau: usize, seed: u64) -> Result<MetaFeature, MetaFeatureError>;
}

impl DatasetEmbedder for WingParams {
    fn embed(&self, instances: &InstanceSet, tau: usize, seed: u64) -> Result<MetaFeature, MetaFeatureError> {
        embed_dataset(self, instances, tau, seed)
    }
}

/// Meta-feature = mean instance vector. Useful as a transparent reference
/// embedder when checking retrieval.
#[derive(Clone, Copy, Debug, Default)]
pub struct InstanceMeanEmbedder;

impl DatasetEmbedder for InstanceMeanEmbedder {
    fn embed(&self, instances: &InstanceSet, tau: usize, seed: u64) -> Result<MetaFeature, MetaFeatureError> {
        let sub = instances.select(&subsample_indices(instances.len(), tau, seed));
        let rows: Vec<Vec<f64>> = sub.rows().map(<[f64]>::to_vec).collect();
        Ok(MetaFeature(aggregate_adf(&rows)?))
    }
}

/// Subsamples `min(tau, count)` instances and runs the wing on them.
pub fn embed_dataset(w: &WingParams, instances: &InstanceSet, tau: usize, seed: u64) -> Result<MetaFeature, MetaFeatureError> {
    if tau == 0 {
        return Err(MetaFeatureError::InvalidConfig("tau must be at least 1".into()));
    }
    let sub = instances.select(&subsample_indices(instances.len(), tau, seed));
    Ok(MetaFeature(w.embed_all(&sub)?))
}

/// Embeds every record of `store` with the same `(tau, seed)`.
pub fn embed_store<E: DatasetEmbedder + ?Sized>(
    embedder: &E,
    store: &HistoryStore,
    tau: usize,
    seed: u64,
) -> Result<Vec<MetaFeature>, MetaFeatureError> {
    store.records().iter().map(|r| embedder.embed(&r.instances, tau, seed)).collect()
}

/// Indices of the `k` features closest to `query`, ascending by distance,
/// ties by position.
pub fn nearest(query: &MetaFeature, features: &[MetaFeature], k: usize) -> Result<Vec<usize>, MetaFeatureError> {
    if k > features.len() {
        return Err(MetaFeatureError::TooManyNeighbours { k, available: features.len() });
    }
    let mut scored = features
        .iter()
        .enumerate()
        .map(|(i, f)| Ok((mf_distance(query, f)?, i)))
        .collect::<Result<Vec<_>, MetaFeatureError>>()?;
    // stable sort keeps record order among equal distances
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Ids of the `k` stored records nearest to `query`.
pub fn knn(query: &MetaFeature, store: &HistoryStore, k: usize) -> Result<Vec<String>, MetaFeatureError> {
    let features = store.metafeatures().ok_or(MetaFeatureError::MissingMetaFeatures)?;
    Ok(nearest(query, features, k)?.into_iter().map(|i| store.records()[i].id.clone()).collect())
}

/// Meta-features of a store's records together with the subsample settings
/// they were computed with; new datasets must be embedded the same way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureTable {
    pub tau: usize,
    pub seed: u64,
    pub entries: Vec<MetaFeatureEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFeatureEntry {
    pub id: String,
    pub values: MetaFeature,
}

impl MetaFeatureTable {
    pub fn compute<E: DatasetEmbedder + ?Sized>(
        embedder: &E,
        store: &HistoryStore,
        tau: usize,
        seed: u64,
    ) -> Result<Self, MetaFeatureError> {
        let features = embed_store(embedder, store, tau, seed)?;
        let entries = store
            .records()
            .iter()
            .zip(features)
            .map(|(r, values)| MetaFeatureEntry { id: r.id.clone(), values })
            .collect();
        Ok(Self { tau, seed, entries })
    }

    /// Returns `store` with these meta-features attached; ids must match in order.
    pub fn attach(&self, store: HistoryStore) -> Result<HistoryStore, MetaFeatureError> {
        let same = self.entries.len() == store.len() && self.entries.iter().zip(store.records()).all(|(e, r)| e.id == r.id);
        if !same {
            return Err(MetaFeatureError::InvalidConfig("meta-feature ids do not match the store's records".into()));
        }
        Ok(store.with_metafeatures(self.entries.iter().map(|e| e.values.clone()).collect())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MetaFeatureError> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, MetaFeatureError> {
        load_json(path)
    }
}

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), MetaFeatureError> {
    let text = serde_json::to_string(value).map_err(|source| MetaFeatureError::Parse { path: path.into(), source })?;
    fs::write(path, text).map_err(|source| MetaFeatureError::Io { path: path.into(), source })
}

pub(crate) fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, MetaFeatureError> {
    let text = fs::read_to_string(path).map_err(|source| MetaFeatureError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| MetaFeatureError::Parse { path: path.into(), source })
}

impl WingParams {
    pub fn save(&self, path: &Path) -> Result<(), MetaFeatureError> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, MetaFeatureError> {
        load_json(path)
    }
}
