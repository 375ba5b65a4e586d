//! Evaluation histories over a shared hyperparameter grid.
//!
//! Every record in a [`HistoryStore`] holds one validation error per grid
//! point, in grid order, so two records can be compared point by point. The
//! store enforces that structure at construction and load time.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperspace::{HyperparameterSpace, HyperparameterVector, SpaceError};
use crate::metafeature::MetaFeature;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("unknown dataset id '{0}'")]
    UnknownId(String),
    #[error("invalid history: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("CCoV is undefined: errors sum to zero")]
    UndefinedCcov,
    #[error("CCoV is undefined for dimension {0}: the grid is constant there")]
    DegenerateDimension(usize),
    #[error("store has no meta-features attached")]
    MissingMetaFeatures,
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HistoryError + '_ {
    move |source| HistoryError::Io { path: path.to_path_buf(), source }
}

/// The `n` hyperparameter vectors every record was evaluated at.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationGrid {
    space: HyperparameterSpace,
    points: Vec<HyperparameterVector>,
}

impl EvaluationGrid {
    pub fn new(space: HyperparameterSpace, points: Vec<HyperparameterVector>) -> Result<Self, HistoryError> {
        if points.is_empty() {
            return Err(HistoryError::Invalid("grid needs at least one point".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !space.validate(p)? {
                return Err(HistoryError::Invalid(format!("grid point {i} is outside the space")));
            }
            if points[..i].contains(p) {
                return Err(HistoryError::Invalid(format!("grid point {i} duplicates an earlier point")));
            }
        }
        Ok(Self { space, points })
    }

    pub fn space(&self) -> &HyperparameterSpace {
        &self.space
    }

    pub fn points(&self) -> &[HyperparameterVector] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fixed-dimension instance vectors with integer class labels.
///
/// Serializes as `{"dim", "data": [[row], ...], "labels"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InlineInstances", into = "InlineInstances")]
pub struct InstanceSet {
    dim: usize,
    /// Row-major, `len() × dim`.
    data: Vec<f64>,
    labels: Vec<u32>,
}

impl InstanceSet {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<u32>) -> Result<Self, HistoryError> {
        if dim == 0 {
            return Err(HistoryError::Invalid("instance dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(HistoryError::Invalid("instance set is empty".into()));
        }
        if data.len() != dim * labels.len() {
            return Err(HistoryError::Invalid(format!(
                "{} values do not form {} rows of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(HistoryError::Invalid("instance values must be finite".into()));
        }
        Ok(Self { dim, data, labels })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self, HistoryError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(HistoryError::Invalid("instance rows have inconsistent lengths".into()));
        }
        if rows.len() != labels.len() {
            return Err(HistoryError::Invalid(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        Self::new(dim, rows.into_iter().flatten().collect(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> InstanceSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        InstanceSet { dim: self.dim, data, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Writes the rows as little-endian `f32`, preceded by `count` and `dim`
    /// as little-endian `u64`.
    pub fn write_binary(&self, path: &Path) -> Result<(), HistoryError> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    /// Reads a file written by [`write_binary`](Self::write_binary); the header
    /// must agree with the declared shape.
    pub fn read_binary(path: &Path, count: usize, dim: usize, labels: Vec<u32>) -> Result<Self, HistoryError> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
        let bad = |msg: String| HistoryError::Parse(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 {
            return Err(bad("missing (count, dim) header".into()));
        }
        let h_count = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
        let h_dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if (h_count, h_dim) != (count, dim) {
            return Err(bad(format!("header declares ({h_count}, {h_dim}), store declares ({count}, {dim})")));
        }
        let body = &bytes[16..];
        if body.len() != 4 * count * dim {
            return Err(bad(format!("expected {} payload bytes, found {}", 4 * count * dim, body.len())));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Self::new(dim, data, labels)
    }
}

#[derive(Serialize, Deserialize)]
struct InlineInstances {
    dim: usize,
    data: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl TryFrom<InlineInstances> for InstanceSet {
    type Error = HistoryError;

    fn try_from(r: InlineInstances) -> Result<Self, Self::Error> {
        if let Some(row) = r.data.iter().position(|row| row.len() != r.dim) {
            return Err(HistoryError::Invalid(format!("instances.data[{row}] does not have dimension {}", r.dim)));
        }
        InstanceSet::new(r.dim, r.data.into_iter().flatten().collect(), r.labels)
    }
}

impl From<InstanceSet> for InlineInstances {
    fn from(s: InstanceSet) -> Self {
        let data = s.rows().map(<[f64]>::to_vec).collect();
        InlineInstances { dim: s.dim, data, labels: s.labels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    /// Subsample fraction of the parent dataset, in `(0, 1]`.
    pub fraction: f64,
    pub parent: Option<String>,
    /// Validation error at each grid point, in grid order.
    pub errors: Vec<f64>,
    pub instances: InstanceSet,
}

impl DatasetRecord {
    fn check(&self, n: usize) -> Result<(), HistoryError> {
        let ctx = |msg: String| HistoryError::Invalid(format!("record '{}': {msg}", self.id));
        if self.errors.len() != n {
            return Err(ctx(format!("errors has {} entries but the grid has {n}", self.errors.len())));
        }
        if let Some((s, e)) = self.errors.iter().enumerate().find(|(_, e)| !(0.0..=1.0).contains(*e)) {
            return Err(ctx(format!("error {e} at grid point {s} is outside [0, 1]")));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ctx(format!("fraction {} is outside (0, 1]", self.fraction)));
        }
        Ok(())
    }
}

/// `Σ_s coord_s·J_s / Σ_s J_s`.
pub fn weighted_center(coords: &[f64], errors: &[f64]) -> Result<f64, HistoryError> {
    if coords.len() != errors.len() {
        return Err(HistoryError::Invalid(format!("{} coordinates but {} errors", coords.len(), errors.len())));
    }
    let total: f64 = errors.iter().sum();
    if total <= 0.0 {
        return Err(HistoryError::UndefinedCcov);
    }
    Ok(coords.iter().zip(errors).map(|(c, e)| c * e).sum::<f64>() / total)
}

/// Grid coordinates in dimension `dim`, min-max normalized over the grid itself.
pub fn observed_normalized(grid: &EvaluationGrid, dim: usize) -> Result<Vec<f64>, HistoryError> {
    if dim >= grid.space.dim_count() {
        return Err(SpaceError::DimensionMismatch { expected: grid.space.dim_count(), got: dim + 1 }.into());
    }
    let raw: Vec<f64> = grid.points.iter().map(|p| p.values()[dim]).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(HistoryError::DegenerateDimension(dim));
    }
    Ok(raw.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Coordinate of the center of validation error in dimension `dim`.
pub fn ccov(record: &DatasetRecord, grid: &EvaluationGrid, dim: usize) -> Result<f64, HistoryError> {
    weighted_center(&observed_normalized(grid, dim)?, &record.errors)
}

/// `ccov − 0.5` for every dimension.
pub fn subtracted_ccov(record: &DatasetRecord, grid: &EvaluationGrid) -> Result<Vec<f64>, HistoryError> {
    (0..grid.space.dim_count()).map(|i| Ok(ccov(record, grid, i)? - 0.5)).collect()
}

/// Dataset histories sharing one grid, optionally with a meta-feature per record.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStore {
    grid: EvaluationGrid,
    records: Vec<DatasetRecord>,
    metafeatures: Option<Vec<MetaFeature>>,
}

impl HistoryStore {
    pub fn new(grid: EvaluationGrid, records: Vec<DatasetRecord>) -> Result<Self, HistoryError> {
        if records.is_empty() {
            return Err(HistoryError::Invalid("a store needs at least one record".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(HistoryError::Invalid(format!("duplicate record id '{}'", r.id)));
            }
            r.check(grid.len())?;
        }
        Ok(Self { grid, records, metafeatures: None })
    }

    pub fn grid(&self) -> &EvaluationGrid {
        &self.grid
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize, HistoryError> {
        self.records
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| HistoryError::UnknownId(id.to_string()))
    }

    pub fn record(&self, id: &str) -> Result<&DatasetRecord, HistoryError> {
        Ok(&self.records[self.index_of(id)?])
    }

    /// Attaches one meta-feature per record, in record order.
    pub fn with_metafeatures(mut self, features: Vec<MetaFeature>) -> Result<Self, HistoryError> {
        if features.len() != self.records.len() {
            return Err(HistoryError::Invalid(format!(
                "{} meta-features for {} records",
                features.len(),
                self.records.len()
            )));
        }
        self.metafeatures = Some(features);
        Ok(self)
    }

    pub fn metafeatures(&self) -> Option<&[MetaFeature]> {
        self.metafeatures.as_deref()
    }

    /// L1 distance between two records' error vectors.
    pub fn target_distance(&self, i: &str, j: &str) -> Result<f64, HistoryError> {
        let (a, b) = (self.record(i)?, self.record(j)?);
        Ok(l1_distance(&a.errors, &b.errors))
    }

    /// Same as [`target_distance`](Self::target_distance), by record index.
    pub fn target_distance_at(&self, i: usize, j: usize) -> f64 {
        l1_distance(&self.records[i].errors, &self.records[j].errors)
    }

    /// Grid point with the lowest error for `id`; ties go to the lowest index.
    pub fn best_on_grid(&self, id: &str) -> Result<&HyperparameterVector, HistoryError> {
        Ok(&self.grid.points[argmin(&self.record(id)?.errors)])
    }

    pub fn save(&self, path: &Path) -> Result<(), HistoryError> {
        let file = StoreFile::from(self);
        let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
        serde_json::to_writer(&mut w, &file).map_err(|e| HistoryError::Parse(e.to_string()))?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, HistoryError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    /// Parses a store document; external instance files resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, HistoryError> {
        let file: StoreFile = serde_json::from_str(text).map_err(|e| HistoryError::Parse(e.to_string()))?;
        file.into_store(base)
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    space: HyperparameterSpace,
    grid: Vec<Vec<f64>>,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    id: String,
    fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    errors: Vec<f64>,
    #[serde(default)]
    instances: Option<InstancesFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum InstancesFile {
    Inline(InlineInstances),
    External { file: PathBuf, count: usize, dim: usize, labels: Vec<u32> },
}

impl From<&HistoryStore> for StoreFile {
    fn from(store: &HistoryStore) -> Self {
        StoreFile {
            space: store.grid.space.clone(),
            grid: store.grid.points.iter().map(|p| p.values().to_vec()).collect(),
            records: store
                .records
                .iter()
                .map(|r| RecordFile {
                    id: r.id.clone(),
                    fraction: r.fraction,
                    parent: r.parent.clone(),
                    errors: r.errors.clone(),
                    instances: Some(InstancesFile::Inline(r.instances.clone().into())),
                })
                .collect(),
        }
    }
}

impl StoreFile {
    fn into_store(self, base: &Path) -> Result<HistoryStore, HistoryError> {
        let grid = EvaluationGrid::new(self.space, self.grid.into_iter().map(HyperparameterVector::new).collect())
            .map_err(|e| HistoryError::Parse(format!("grid: {e}")))?;
        let n = grid.len();
        let mut records = Vec::with_capacity(self.records.len());
        for (idx, r) in self.records.into_iter().enumerate() {
            let ctx = |msg: String| HistoryError::Parse(format!("records[{idx}] (id '{}'): {msg}", r.id));
            if r.errors.len() != n {
                return Err(ctx(format!("errors has {} entries but the grid has {n}", r.errors.len())));
            }
            let instances = match r.instances {
                None => return Err(ctx("missing instances block".into())),
                Some(InstancesFile::Inline(inline)) => InstanceSet::try_from(inline),
                Some(InstancesFile::External { file, count, dim, labels }) => {
                    if labels.len() != count {
                        return Err(ctx(format!("{} labels for {count} instances", labels.len())));
                    }
                    InstanceSet::read_binary(&base.join(file), count, dim, labels)
                }
            }
            .map_err(|e| ctx(e.to_string()))?;
            let record = DatasetRecord { id: r.id.clone(), fraction: r.fraction, parent: r.parent, errors: r.errors, instances };
            record.check(n).map_err(|e| ctx(e.to_string()))?;
            records.push(record);
        }
        HistoryStore::new(grid, records).map_err(|e| HistoryError::Parse(e.to_string()))
    }
}
