//! Layered parameter vectors.
//!
//! A [`ParamVector`] is a flat real vector cut into per-layer segments. Whole-vector
//! operations treat it as the concatenation of its layers; the segmentation exists
//! so that projections and cosine filtering can also be applied layer by layer.
//!
//! Sums are accumulated left to right inside a layer and layers are added in index
//! order, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layers: Vec<Vec<f64>>,
}

impl ParamVector {
    /// Build from explicit layers. Rejects an all-empty layout and non-finite entries.
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        let v = ParamVector { layers };
        if v.total_dim() == 0 {
            return Err(FdaError::shape("parameter vector must have at least one entry"));
        }
        if !v.is_finite() {
            return Err(FdaError::Numeric("parameter vector has non-finite entries".into()));
        }
        Ok(v)
    }

    /// Single-layer vector.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values])
    }

    /// Re-segment a flat slice into layers of the given lengths.
    pub fn from_flat_with_layout(layout: &[usize], values: &[f64]) -> Result<Self> {
        let total: usize = layout.iter().sum();
        if total != values.len() {
            return Err(FdaError::shape(format!(
                "layout covers {total} entries but {} values were given",
                values.len()
            )));
        }
        let mut layers = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for &len in layout {
            layers.push(values[offset..offset + len].to_vec());
            offset += len;
        }
        Self::new(layers)
    }

    pub fn zeros(layout: &[usize]) -> Self {
        ParamVector {
            layers: layout.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layout())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&[f64]> {
        self.layers.get(index).map(Vec::as_slice)
    }

    pub(crate) fn layer_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.layers[index]
    }

    pub(crate) fn first_two_layers_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (a, b) = self.layers.split_at_mut(1);
        (&mut a[0], &mut b[0])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer lengths.
    pub fn layout(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Total number of parameters (the model dimension).
    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn is_conformable(&self, other: &ParamVector) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.len() == b.len())
    }

    pub fn check_conformable(&self, other: &ParamVector) -> Result<()> {
        if self.is_conformable(other) {
            Ok(())
        } else {
            Err(FdaError::shape(format!(
                "layouts {:?} and {:?} are not conformable",
                self.layout(),
                other.layout()
            )))
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| dot_slice(l, l)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            layers: self.layers.iter().map(|l| l.iter().map(|x| c * x).collect()).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for x in self.layers.iter_mut().flatten() {
            *x *= c;
        }
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.check_conformable(x)?;
        for (dst, src) in self.layers.iter_mut().zip(&x.layers) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.check_conformable(other)?;
        Ok(ParamVector {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }

    /// Arithmetic mean of conformable vectors.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| FdaError::shape("mean of an empty set of vectors"))?;
        let mut acc = first.zeros_like();
        for v in vectors {
            acc.axpy(1.0, v)?;
        }
        acc.scale_in_place(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Euclidean inner product over all layers.
pub fn inner(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_conformable(b)?;
    Ok(a.layers.iter().zip(&b.layers).map(|(x, y)| dot_slice(x, y)).sum())
}

/// Inner product restricted to one layer.
pub fn layer_inner(a: &ParamVector, b: &ParamVector, layer_index: usize) -> Result<f64> {
    a.check_conformable(b)?;
    if layer_index >= a.num_layers() {
        return Err(FdaError::shape(format!(
            "layer index {layer_index} out of range for {} layers",
            a.num_layers()
        )));
    }
    Ok(dot_slice(&a.layers[layer_index], &b.layers[layer_index]))
}

/// Empirical measure on parameter space: equal-weight atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiMeasure {
    points: Vec<ParamVector>,
}

impl PiMeasure {
    pub fn new(points: Vec<ParamVector>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| FdaError::shape("measure needs at least one atom"))?;
        for p in &points[1..] {
            first.check_conformable(p)?;
        }
        Ok(PiMeasure { points })
    }

    pub fn point_mass(theta: ParamVector) -> Self {
        PiMeasure { points: vec![theta] }
    }

    pub fn points(&self) -> &[ParamVector] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `E_{θ∼π} ‖f(θ)‖²`.
pub fn pi_norm_sq<F>(mut f: F, pi: &PiMeasure) -> Result<f64>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    if pi.is_empty() {
        return Err(FdaError::shape("empty measure"));
    }
    let mut total = 0.0;
    for theta in pi.points() {
        total += f(theta)?.norm_sq();
    }
    Ok(total / pi.len() as f64)
}

/// Mean squared norm of a function already evaluated on the atoms of a measure.
pub fn field_norm_sq(values: &[ParamVector]) -> Result<f64> {
    if values.is_empty() {
        return Err(FdaError::shape("empty field"));
    }
    Ok(values.iter().map(ParamVector::norm_sq).sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(layers: &[&[f64]]) -> ParamVector {
        ParamVector::new(layers.iter().map(|l| l.to_vec()).collect()).unwrap()
    }

    #[test]
    fn inner_examples() {
        assert_eq!(inner(&pv(&[&[1., 0., 2.]]), &pv(&[&[0., 5., 1.]])).unwrap(), 2.0);
        let v = pv(&[&[3., 4.]]);
        assert_eq!(inner(&v, &v).unwrap(), 25.0);
        assert_eq!(inner(&pv(&[&[1., 0.]]), &pv(&[&[0., 1.]])).unwrap(), 0.0);
    }

    #[test]
    fn inner_rejects_mismatched_layouts() {
        let a = pv(&[&[1., 2.], &[3.]]);
        let b = pv(&[&[1.], &[2., 3.]]);
        assert!(matches!(inner(&a, &b), Err(FdaError::Shape(_))));
    }

    #[test]
    fn layer_inner_examples() {
        let a = pv(&[&[1., 0.], &[2.]]);
        let b = pv(&[&[0., 1.], &[3.]]);
        assert_eq!(layer_inner(&a, &b, 0).unwrap(), 0.0);
        assert_eq!(layer_inner(&a, &b, 1).unwrap(), 6.0);
        assert_eq!(inner(&a, &b).unwrap(), 6.0);
        assert!(layer_inner(&a, &b, 2).is_err());
    }

    #[test]
    fn pi_norm_sq_examples() {
        let theta = pv(&[&[0.0]]);
        let pi = PiMeasure::new(vec![theta.clone(), pv(&[&[1.0]])]).unwrap();
        let c = pi_norm_sq(|_| Ok(pv(&[&[3., 4.]])), &pi).unwrap();
        assert_eq!(c, 25.0);
        let z = pi_norm_sq(|_| Ok(ParamVector::zeros(&[2])), &pi).unwrap();
        assert_eq!(z, 0.0);
        // ‖f(θ₁)‖² = 1, ‖f(θ₂)‖² = 3
        let two = pi_norm_sq(
            |t| {
                if t.to_flat()[0] == 0.0 {
                    Ok(pv(&[&[1.0, 0.0]]))
                } else {
                    Ok(pv(&[&[1.0, 2f64.sqrt()]]))
                }
            },
            &pi,
        )
        .unwrap();
        assert!((two - 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_measure_rejected() {
        assert!(PiMeasure::new(vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ParamVector::new(vec![vec![f64::NAN]]).is_err());
        assert!(ParamVector::new(vec![vec![]]).is_err());
    }

    fn two_layer(len_a: usize, len_b: usize) -> impl Strategy<Value = ParamVector> {
        (
            proptest::collection::vec(-10.0f64..10.0, len_a),
            proptest::collection::vec(-10.0f64..10.0, len_b),
        )
            .prop_map(|(a, b)| ParamVector::new(vec![a, b]).unwrap())
    }

    proptest! {
        #[test]
        fn cauchy_schwarz(a in two_layer(3, 4), b in two_layer(3, 4)) {
            let ab = inner(&a, &b).unwrap();
            let lhs = ab * ab;
            let rhs = a.norm_sq() * b.norm_sq();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn layer_additivity(a in two_layer(5, 2), b in two_layer(5, 2)) {
            let total = inner(&a, &b).unwrap();
            let parts = layer_inner(&a, &b, 0).unwrap() + layer_inner(&a, &b, 1).unwrap();
            prop_assert!((total - parts).abs() <= 1e-12 * total.abs().max(1.0));
        }

        // d(f,g) = ‖f − g‖_π over random affine functions on a 3-atom measure.
        #[test]
        fn pi_distance_is_a_pseudometric(
            atoms in proptest::collection::vec(two_layer(2, 1), 3),
            fs in proptest::collection::vec((two_layer(2, 1), -2.0f64..2.0), 3),
        ) {
            let pi = PiMeasure::new(atoms).unwrap();
            let eval = |k: usize, t: &ParamVector| -> Result<ParamVector> {
                let (offset, slope) = &fs[k];
                let mut out = offset.clone();
                out.axpy(*slope, t)?;
                Ok(out)
            };
            let dist = |i: usize, j: usize| -> f64 {
                pi_norm_sq(|t| eval(i, t)?.sub(&eval(j, t)?), &pi).unwrap().sqrt()
            };
            prop_assert_eq!(dist(0, 0), 0.0);
            prop_assert!((dist(0, 1) - dist(1, 0)).abs() < 1e-12);
            prop_assert!(dist(0, 2) <= dist(0, 1) + dist(1, 2) + 1e-9);
        }
    }
}
