//! One wing of the Siamese network: a per-instance feature extractor, mean
//! aggregation over instances, and a fully-connected head.
//!
//! Activations are kept column-per-instance, so a subsample of `τ` instances
//! is one `features × τ` matrix and every layer is a single matmul.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetaFeatureError;
use crate::history::InstanceSet;
use crate::rng::{self, Stream};

/// Fully-connected layer, `out × in` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: DMatrix::zeros(outputs, inputs), bias: DVector::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Layer widths of a wing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WingShape {
    pub instance_dim: usize,
    pub num_classes: usize,
    /// Extractor output widths; the last one is the feature dimension.
    pub extractor: Vec<usize>,
    /// Hidden head widths, each followed by a ReLU.
    pub head: Vec<usize>,
    pub meta_dim: usize,
}

impl WingShape {
    pub fn new(instance_dim: usize, num_classes: usize) -> Self {
        Self { instance_dim, num_classes, extractor: vec![64, 64], head: vec![256, 256], meta_dim: 256 }
    }

    fn validate(&self) -> Result<(), MetaFeatureError> {
        let bad = |m: &str| Err(MetaFeatureError::InvalidConfig(m.into()));
        if self.instance_dim == 0 || self.num_classes == 0 || self.meta_dim == 0 {
            return bad("instance_dim, num_classes and meta_dim must be positive");
        }
        if self.extractor.is_empty() {
            return bad("the extractor needs at least one layer");
        }
        if self.extractor.iter().chain(&self.head).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WingParams {
    pub(crate) instance_dim: usize,
    pub(crate) num_classes: usize,
    /// Every layer followed by a ReLU.
    pub(crate) extractor: Vec<Dense>,
    /// ReLU after every layer except the last.
    pub(crate) head: Vec<Dense>,
}

/// Activations recorded by a forward pass, consumed by [`WingParams::backward`].
pub(crate) struct Tape {
    /// `acts[0]` is the input; `acts[l + 1]` the output of extractor layer `l`.
    extractor: Vec<DMatrix<f64>>,
    /// `head[0]` is the aggregated feature; the last entry is the meta-feature.
    head: Vec<DVector<f64>>,
}

impl Tape {
    pub(crate) fn output(&self) -> &DVector<f64> {
        self.head.last().expect("tape always has an output")
    }
}

fn relu_in_place<S: nalgebra::RawStorageMut<f64, R, C>, R: nalgebra::Dim, C: nalgebra::Dim>(
    m: &mut nalgebra::Matrix<f64, R, C, S>,
) {
    m.apply(|x| *x = x.max(0.0));
}

impl WingParams {
    /// Fan-in scaled uniform weights `U(−1/√in, 1/√in)`, zero biases.
    pub fn init(shape: &WingShape, seed: u64) -> Result<Self, MetaFeatureError> {
        shape.validate()?;
        let mut rng = rng::stream(seed, Stream::WingInit);
        let mut layer = |inputs: usize, outputs: usize| {
            let scale = 1.0 / (inputs as f64).sqrt();
            let mut d = Dense::zeros(inputs, outputs);
            // fill row-major so the draw order matches the serialized layout
            for r in 0..outputs {
                for c in 0..inputs {
                    d.weights[(r, c)] = rng.random_range(-scale..=scale);
                }
            }
            d
        };
        let mut width = shape.instance_dim + 1;
        let mut extractor = Vec::new();
        for &w in &shape.extractor {
            extractor.push(layer(width, w));
            width = w;
        }
        let mut head = Vec::new();
        for &w in shape.head.iter().chain(std::iter::once(&shape.meta_dim)) {
            head.push(layer(width, w));
            width = w;
        }
        Ok(Self { instance_dim: shape.instance_dim, num_classes: shape.num_classes, extractor, head })
    }

    pub fn from_layers(
        instance_dim: usize,
        num_classes: usize,
        extractor: Vec<Dense>,
        head: Vec<Dense>,
    ) -> Result<Self, MetaFeatureError> {
        let w = Self { instance_dim, num_classes, extractor, head };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<(), MetaFeatureError> {
        let bad = |m: String| Err(MetaFeatureError::InvalidConfig(m));
        if self.num_classes == 0 || self.extractor.is_empty() || self.head.is_empty() {
            return bad("a wing needs classes, extractor layers and head layers".into());
        }
        let mut width = self.instance_dim + 1;
        for (i, l) in self.extractor.iter().chain(&self.head).enumerate() {
            if l.inputs() != width || l.bias.len() != l.outputs() {
                return bad(format!("layer {i} has shape {}×{}, expected {width} inputs", l.outputs(), l.inputs()));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return bad(format!("layer {i} has non-finite weights"));
            }
            width = l.outputs();
        }
        Ok(())
    }

    pub fn shape(&self) -> WingShape {
        WingShape {
            instance_dim: self.instance_dim,
            num_classes: self.num_classes,
            extractor: self.extractor.iter().map(Dense::outputs).collect(),
            head: self.head[..self.head.len() - 1].iter().map(Dense::outputs).collect(),
            meta_dim: self.meta_dim(),
        }
    }

    pub fn instance_dim(&self) -> usize {
        self.instance_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.last().expect("non-empty extractor").outputs()
    }

    pub fn meta_dim(&self) -> usize {
        self.head.last().expect("non-empty head").outputs()
    }

    pub fn extractor(&self) -> &[Dense] {
        &self.extractor
    }

    pub fn head(&self) -> &[Dense] {
        &self.head
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.extractor.iter().chain(&self.head)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.extractor.iter_mut().chain(self.head.iter_mut())
    }

    /// Same shape, all zeros.
    pub(crate) fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs(), d.outputs());
        Self {
            instance_dim: self.instance_dim,
            num_classes: self.num_classes,
            extractor: self.extractor.iter().map(z).collect(),
            head: self.head.iter().map(z).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weights then bias for each layer in order (weights in storage order).
    pub(crate) fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub(crate) fn assign(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in self.layers_mut() {
            let n = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let m = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[at..at + m]);
            at += m;
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.weights *= s;
            l.bias *= s;
        }
    }

    /// Instances as columns with the scaled label appended as the last row.
    pub(crate) fn input_matrix(&self, instances: &InstanceSet) -> Result<DMatrix<f64>, MetaFeatureError> {
        if instances.dim() != self.instance_dim {
            return Err(MetaFeatureError::DimensionMismatch { expected: self.instance_dim, got: instances.dim() });
        }
        let d = self.instance_dim;
        let classes = self.num_classes as f64;
        Ok(DMatrix::from_fn(d + 1, instances.len(), |r, c| {
            if r < d {
                instances.row(c)[r]
            } else {
                instances.labels()[c] as f64 / classes
            }
        }))
    }

    fn extract(&self, mut a: DMatrix<f64>, mut record: Option<&mut Vec<DMatrix<f64>>>) -> DMatrix<f64> {
        for l in &self.extractor {
            let mut z = &l.weights * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            relu_in_place(&mut z);
            if let Some(r) = record.as_deref_mut() {
                r.push(std::mem::replace(&mut a, z));
            } else {
                a = z;
            }
        }
        a
    }

    /// Per-instance extractor outputs, one column per instance.
    pub(crate) fn feature_matrix(&self, instances: &InstanceSet) -> Result<DMatrix<f64>, MetaFeatureError> {
        Ok(self.extract(self.input_matrix(instances)?, None))
    }

    /// `h^df` for every instance, in instance order.
    pub fn deep_features(&self, instances: &InstanceSet) -> Result<Vec<Vec<f64>>, MetaFeatureError> {
        let f = self.feature_matrix(instances)?;
        Ok(f.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    fn run_head(&self, mut h: DVector<f64>, mut record: Option<&mut Vec<DVector<f64>>>) -> DVector<f64> {
        let last = self.head.len() - 1;
        for (i, l) in self.head.iter().enumerate() {
            let mut z = &l.weights * &h + &l.bias;
            if i < last {
                relu_in_place(&mut z);
            }
            if let Some(r) = record.as_deref_mut() {
                r.push(std::mem::replace(&mut h, z));
            } else {
                h = z;
            }
        }
        h
    }

    /// Head applied to an aggregated feature `h^mf`.
    pub fn head_forward(&self, aggregated: &[f64]) -> Result<Vec<f64>, MetaFeatureError> {
        if aggregated.len() != self.feature_dim() {
            return Err(MetaFeatureError::DimensionMismatch { expected: self.feature_dim(), got: aggregated.len() });
        }
        Ok(self.run_head(DVector::from_column_slice(aggregated), None).iter().copied().collect())
    }

    /// Meta-feature of exactly the given instances (no subsampling).
    pub fn embed_all(&self, instances: &InstanceSet) -> Result<Vec<f64>, MetaFeatureError> {
        let f = self.feature_matrix(instances)?;
        Ok(self.run_head(column_mean(&f), None).iter().copied().collect())
    }

    pub(crate) fn forward(&self, instances: &InstanceSet) -> Result<Tape, MetaFeatureError> {
        let x = self.input_matrix(instances)?;
        let mut ext = Vec::with_capacity(self.extractor.len() + 1);
        let last = self.extract(x, Some(&mut ext));
        let h = column_mean(&last);
        ext.push(last);
        let mut head = Vec::with_capacity(self.head.len() + 1);
        let out = self.run_head(h, Some(&mut head));
        head.push(out);
        Ok(Tape { extractor: ext, head })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to this tape's meta-feature is `d_out`.
    pub(crate) fn backward(&self, tape: &Tape, d_out: DVector<f64>, grads: &mut WingParams) {
        let mut delta = d_out;
        for l in (0..self.head.len()).rev() {
            let input = &tape.head[l];
            grads.head[l].weights.ger(1.0, &delta, input, 1.0);
            grads.head[l].bias += &delta;
            let mut back = self.head[l].weights.tr_mul(&delta);
            if l > 0 {
                back.zip_apply(input, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            delta = back;
        }

        let acts = &tape.extractor;
        let top = &acts[acts.len() - 1];
        let tau = top.ncols() as f64;
        delta /= tau;
        let mut spread = DMatrix::from_fn(top.nrows(), top.ncols(), |r, c| if top[(r, c)] > 0.0 { delta[r] } else { 0.0 });
        for l in (0..self.extractor.len()).rev() {
            let input = &acts[l];
            grads.extractor[l].weights.gemm(1.0, &spread, &input.transpose(), 1.0);
            grads.extractor[l].bias += spread.column_sum();
            if l > 0 {
                let mut back = self.extractor[l].weights.tr_mul(&spread);
                back.zip_apply(input, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                spread = back;
            }
        }
    }
}

fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct WingRepr {
    instance_dim: usize,
    num_classes: usize,
    extractor_sizes: Vec<usize>,
    head_sizes: Vec<usize>,
    extractor: Vec<LayerRepr>,
    head: Vec<LayerRepr>,
}

fn sizes(input: usize, layers: &[Dense]) -> Vec<usize> {
    std::iter::once(input).chain(layers.iter().map(Dense::outputs)).collect()
}

impl From<&WingParams> for WingRepr {
    fn from(w: &WingParams) -> Self {
        let layer = |d: &Dense| LayerRepr {
            inputs: d.inputs(),
            outputs: d.outputs(),
            weights: d.weights.transpose().as_slice().to_vec(),
            bias: d.bias.as_slice().to_vec(),
        };
        WingRepr {
            instance_dim: w.instance_dim,
            num_classes: w.num_classes,
            extractor_sizes: sizes(w.instance_dim + 1, &w.extractor),
            head_sizes: sizes(w.feature_dim(), &w.head),
            extractor: w.extractor.iter().map(layer).collect(),
            head: w.head.iter().map(layer).collect(),
        }
    }
}

impl TryFrom<WingRepr> for WingParams {
    type Error = MetaFeatureError;

    fn try_from(r: WingRepr) -> Result<Self, Self::Error> {
        let layer = |l: LayerRepr| {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(MetaFeatureError::InvalidConfig(format!(
                    "layer declared {}×{} but holds {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            Ok(Dense {
                weights: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights),
                bias: DVector::from_vec(l.bias),
            })
        };
        let extractor = r.extractor.into_iter().map(layer).collect::<Result<Vec<_>, _>>()?;
        let head = r.head.into_iter().map(layer).collect::<Result<Vec<_>, _>>()?;
        let w = WingParams::from_layers(r.instance_dim, r.num_classes, extractor, head)?;
        if r.extractor_sizes != sizes(w.instance_dim + 1, &w.extractor) || r.head_sizes != sizes(w.feature_dim(), &w.head) {
            return Err(MetaFeatureError::InvalidConfig("declared layer sizes disagree with the weights".into()));
        }
        Ok(w)
    }
}

impl Serialize for WingParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WingRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for WingParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        WingParams::try_from(WingRepr::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> WingShape {
        WingShape { instance_dim: 3, num_classes: 2, extractor: vec![5, 4], head: vec![6], meta_dim: 3 }
    }

    fn instances(n: usize) -> InstanceSet {
        let rows = (0..n).map(|i| vec![i as f64 * 0.3 - 0.5, (i as f64).sin(), 1.0 - i as f64 * 0.1]).collect();
        InstanceSet::from_rows(rows, (0..n).map(|i| (i % 2) as u32).collect()).unwrap()
    }

    #[test]
    fn default_shape_matches_documented_widths() {
        let w = WingParams::init(&WingShape::new(16, 4), 0).unwrap();
        assert_eq!(w.extractor()[0].inputs(), 17);
        assert_eq!(w.feature_dim(), 64);
        let widths: Vec<usize> = w.head().iter().map(Dense::outputs).collect();
        assert_eq!(widths, vec![256, 256, 256]);
        assert_eq!(w.meta_dim(), 256);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let w = WingParams::init(&small_shape(), 1).unwrap().zeros_like();
        let f = w.deep_features(&instances(4)).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn features_are_per_instance() {
        let w = WingParams::init(&small_shape(), 2).unwrap();
        let all = w.deep_features(&instances(5)).unwrap();
        let one = w.deep_features(&instances(5).select(&[3])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 4);
        assert_eq!(one[0], all[3]);
    }

    #[test]
    fn label_channel_is_scaled() {
        let w = WingParams::init(&small_shape(), 0).unwrap();
        let x = w.input_matrix(&instances(2)).unwrap();
        assert_eq!(x.nrows(), 4);
        assert_eq!(x[(3, 0)], 0.0);
        assert_eq!(x[(3, 1)], 0.5);
    }

    #[test]
    fn rejects_wrong_instance_dim() {
        let w = WingParams::init(&small_shape(), 0).unwrap();
        let bad = InstanceSet::from_rows(vec![vec![1.0, 2.0]], vec![0]).unwrap();
        assert!(matches!(w.deep_features(&bad), Err(MetaFeatureError::DimensionMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let w = WingParams::init(&small_shape(), 9).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        let back: WingParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["extractor_sizes"], serde_json::json!([4, 5, 4]));
        assert_eq!(v["head_sizes"], serde_json::json!([4, 6, 3]));
        // row-major layout
        assert_eq!(v["extractor"][0]["weights"][1].as_f64().unwrap(), w.extractor()[0].weights[(0, 1)]);
    }

    #[test]
    fn json_rejects_broken_chain() {
        let w = WingParams::init(&small_shape(), 9).unwrap();
        let mut v = serde_json::to_value(&w).unwrap();
        v["head_sizes"] = serde_json::json!([4, 7, 3]);
        assert!(serde_json::from_value::<WingParams>(v).is_err());
    }

    #[test]
    fn tape_output_matches_embedding() {
        let w = WingParams::init(&small_shape(), 4).unwrap();
        let inst = instances(6);
        let tape = w.forward(&inst).unwrap();
        let direct = w.embed_all(&inst).unwrap();
        assert_eq!(tape.output().as_slice(), &direct[..]);
    }
}
