//! Hyperparameter spaces, points in them, and the unit-cube embedding used by
//! the surrogate model and the samplers.
//!
//! Every dimension is laid out on a continuous `[lower, upper]` axis. Integer
//! sets use the set's minimum and maximum as that axis and are snapped to the
//! nearest member when mapping back from the unit cube. Integer-cast
//! dimensions stay real-valued until a target consumes them
//! ([`HyperparameterSpace::cast_for_evaluation`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("coordinate {index} = {value} is outside the unit interval")]
    OutOfUnitRange { index: usize, value: f64 },
    #[error("coordinate {index} ({name}) = {value} is not a valid value")]
    InvalidCoordinate { index: usize, name: String, value: f64 },
    #[error("invalid dimension '{name}': {reason}")]
    InvalidDimension { name: String, reason: String },
    #[error("duplicate dimension name '{0}'")]
    DuplicateName(String),
    #[error("a space needs at least one dimension")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DimensionKind {
    Real,
    /// Searched as a real number, truncated to an integer by the consumer.
    IntCast,
    /// Strictly increasing list of admissible integers.
    IntSet(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionSpec {
    name: String,
    lower: f64,
    upper: f64,
    kind: DimensionKind,
}

impl DimensionSpec {
    pub fn real(name: impl Into<String>, lower: f64, upper: f64) -> Result<Self, SpaceError> {
        Self::with_range(name.into(), lower, upper, DimensionKind::Real)
    }

    pub fn int_cast(name: impl Into<String>, lower: f64, upper: f64) -> Result<Self, SpaceError> {
        Self::with_range(name.into(), lower, upper, DimensionKind::IntCast)
    }

    pub fn int_set(name: impl Into<String>, members: Vec<i64>) -> Result<Self, SpaceError> {
        let name = name.into();
        if members.is_empty() {
            return Err(SpaceError::InvalidDimension { name, reason: "empty integer set".into() });
        }
        if members.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SpaceError::InvalidDimension {
                name,
                reason: "integer set must be strictly increasing".into(),
            });
        }
        let (lower, upper) = (members[0] as f64, members[members.len() - 1] as f64);
        Self::with_range(name, lower, upper, DimensionKind::IntSet(members))
    }

    fn with_range(name: String, lower: f64, upper: f64, kind: DimensionKind) -> Result<Self, SpaceError> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(SpaceError::InvalidDimension { name, reason: "bounds must be finite".into() });
        }
        if lower >= upper {
            return Err(SpaceError::InvalidDimension {
                name,
                reason: format!("lower bound {lower} must be below upper bound {upper}"),
            });
        }
        Ok(Self { name, lower, upper, kind })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn kind(&self) -> &DimensionKind {
        &self.kind
    }

    fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        match &self.kind {
            DimensionKind::Real | DimensionKind::IntCast => {
                value.is_finite() && value >= self.lower && value <= self.upper
            }
            DimensionKind::IntSet(members) => members.iter().any(|&m| m as f64 == value),
        }
    }

    fn value_at(&self, u: f64) -> f64 {
        let raw = self.lower + u * self.width();
        match &self.kind {
            DimensionKind::Real | DimensionKind::IntCast => raw.clamp(self.lower, self.upper),
            // members are sorted, so the first minimal distance is the lower of two equidistant members
            DimensionKind::IntSet(members) => {
                let mut best = members[0];
                for &m in members {
                    if (m as f64 - raw).abs() < (best as f64 - raw).abs() {
                        best = m;
                    }
                }
                best as f64
            }
        }
    }
}

/// A point `θ` in raw (un-normalized) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparameterVector(Vec<f64>);

impl HyperparameterVector {
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for HyperparameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// The domain `Θ = Θ_1 × … × Θ_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct HyperparameterSpace {
    dims: Vec<DimensionSpec>,
}

impl HyperparameterSpace {
    pub fn new(dims: Vec<DimensionSpec>) -> Result<Self, SpaceError> {
        if dims.is_empty() {
            return Err(SpaceError::Empty);
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(SpaceError::DuplicateName(d.name.clone()));
            }
        }
        Ok(Self { dims })
    }

    /// The six-dimensional CNN space: learning rate and decay on a log10
    /// scale, batch size, convolutional and fully-connected depth, dropout.
    pub fn canonical_cnn() -> Self {
        let dims = vec![
            DimensionSpec::real("log10_learning_rate", -5.0, 0.0),
            DimensionSpec::real("log10_decay_rate", -8.0, -4.0),
            DimensionSpec::int_cast("batch_size", 100.0, 400.0),
            DimensionSpec::int_set("num_layers_conv", (1..=9).collect()),
            DimensionSpec::int_set("num_layers_fc", vec![1, 2, 3]),
            DimensionSpec::real("dropout_rate", 0.0, 0.9),
        ];
        Self::new(dims.into_iter().collect::<Result<_, _>>().expect("canonical dims are valid"))
            .expect("canonical names are unique")
    }

    /// The unit hypercube `[0,1]^d` with real dimensions `x1..xd`.
    pub fn unit_cube(d: usize) -> Result<Self, SpaceError> {
        let dims = (1..=d)
            .map(|i| DimensionSpec::real(format!("x{i}"), 0.0, 1.0))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dims)
    }

    pub fn dims(&self) -> &[DimensionSpec] {
        &self.dims
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    fn check_len(&self, len: usize) -> Result<(), SpaceError> {
        if len != self.dims.len() {
            return Err(SpaceError::DimensionMismatch { expected: self.dims.len(), got: len });
        }
        Ok(())
    }

    /// `Ok(true)` iff every coordinate satisfies its dimension.
    pub fn validate(&self, v: &HyperparameterVector) -> Result<bool, SpaceError> {
        self.check_len(v.len())?;
        Ok(self.dims.iter().zip(v.values()).all(|(d, &x)| d.contains(x)))
    }

    /// Maps `v` affinely onto `[0,1]^d` using the space bounds.
    pub fn normalize(&self, v: &HyperparameterVector) -> Result<Vec<f64>, SpaceError> {
        self.check_len(v.len())?;
        self.dims
            .iter()
            .zip(v.values())
            .enumerate()
            .map(|(index, (d, &x))| {
                if !d.contains(x) {
                    return Err(SpaceError::InvalidCoordinate { index, name: d.name.clone(), value: x });
                }
                Ok((x - d.lower) / d.width())
            })
            .collect()
    }

    /// Inverse of [`normalize`](Self::normalize); integer sets snap to the nearest member.
    pub fn denormalize(&self, u: &[f64]) -> Result<HyperparameterVector, SpaceError> {
        self.check_len(u.len())?;
        let mut out = Vec::with_capacity(u.len());
        for (index, (d, &x)) in self.dims.iter().zip(u).enumerate() {
            if !(0.0..=1.0).contains(&x) {
                return Err(SpaceError::OutOfUnitRange { index, value: x });
            }
            out.push(d.value_at(x));
        }
        Ok(HyperparameterVector(out))
    }

    /// Snaps a unit-cube point onto the representable lattice (integer sets),
    /// returning the normalized coordinates of the snapped point.
    pub fn snap_unit(&self, u: &[f64]) -> Result<Vec<f64>, SpaceError> {
        let v = self.denormalize(u)?;
        self.normalize(&v)
    }

    /// Coordinates as a target model consumes them: integer-cast dimensions
    /// are truncated toward zero.
    pub fn cast_for_evaluation(&self, v: &HyperparameterVector) -> Result<Vec<f64>, SpaceError> {
        self.check_len(v.len())?;
        Ok(self
            .dims
            .iter()
            .zip(v.values())
            .map(|(d, &x)| match d.kind {
                DimensionKind::IntCast => x.trunc(),
                _ => x,
            })
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct SpaceRepr {
    dims: Vec<DimRepr>,
}

#[derive(Serialize, Deserialize)]
struct DimRepr {
    name: String,
    kind: String,
    lower: f64,
    upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    set: Option<Vec<i64>>,
}

impl TryFrom<SpaceRepr> for HyperparameterSpace {
    type Error = SpaceError;

    fn try_from(repr: SpaceRepr) -> Result<Self, Self::Error> {
        let mut dims = Vec::with_capacity(repr.dims.len());
        for d in repr.dims {
            let spec = match (d.kind.as_str(), d.set) {
                ("real", None) => DimensionSpec::real(d.name, d.lower, d.upper)?,
                ("int_cast", None) => DimensionSpec::int_cast(d.name, d.lower, d.upper)?,
                ("int_set", Some(set)) => {
                    let spec = DimensionSpec::int_set(d.name, set)?;
                    if spec.lower != d.lower || spec.upper != d.upper {
                        return Err(SpaceError::InvalidDimension {
                            name: spec.name,
                            reason: "lower/upper must equal the set's minimum and maximum".into(),
                        });
                    }
                    spec
                }
                ("int_set", None) => {
                    return Err(SpaceError::InvalidDimension { name: d.name, reason: "int_set requires 'set'".into() })
                }
                (kind, _) => {
                    return Err(SpaceError::InvalidDimension {
                        name: d.name,
                        reason: format!("unsupported kind '{kind}' (or 'set' given for a non-set kind)"),
                    })
                }
            };
            dims.push(spec);
        }
        HyperparameterSpace::new(dims)
    }
}

impl From<HyperparameterSpace> for SpaceRepr {
    fn from(space: HyperparameterSpace) -> Self {
        let dims = space
            .dims
            .into_iter()
            .map(|d| {
                let (kind, set) = match d.kind {
                    DimensionKind::Real => ("real", None),
                    DimensionKind::IntCast => ("int_cast", None),
                    DimensionKind::IntSet(m) => ("int_set", Some(m)),
                };
                DimRepr { name: d.name, kind: kind.into(), lower: d.lower, upper: d.upper, set }
            })
            .collect();
        SpaceRepr { dims }
    }
}
