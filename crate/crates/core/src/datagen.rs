//! Synthetic and semi-synthetic domain generators.
//!
//! * [`gen_synthetic`]: Gaussian-mixture inputs with regression targets given by
//!   sums of radial basis functions; `shift_level` perturbs the basis parameters
//!   to produce increasingly shifted domains.
//! * [`gen_blobs`]: isotropic Gaussian class blobs, the desk-scale stand-in for an
//!   image classification task, plus the feature-noise and label-shift transforms.
//!
//! Each generator is a pure function of its spec. Independent keyed streams are
//! used for every random ingredient (see [`crate::rng`]).

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::model::{Dataset, Targets};
use crate::rng;

/// Smallest basis bandwidth; keeps `(2σ)²` away from zero after perturbation.
const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "SyntheticSpec::default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "SyntheticSpec::default_output_dim")]
    pub output_dim: usize,
    #[serde(default = "SyntheticSpec::default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "SyntheticSpec::default_n_basis")]
    pub n_basis: usize,
    #[serde(default = "SyntheticSpec::default_n_mixture")]
    pub n_mixture: usize,
    #[serde(default)]
    pub shift_level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    fn default_input_dim() -> usize {
        50
    }
    fn default_output_dim() -> usize {
        10
    }
    fn default_n_samples() -> usize {
        5000
    }
    fn default_n_basis() -> usize {
        100
    }
    fn default_n_mixture() -> usize {
        10
    }

    /// 50-dimensional inputs, 10 outputs, 5000 samples, 100 basis functions, 10 mixture components.
    pub fn full_scale(seed: u64) -> Self {
        SyntheticSpec {
            input_dim: 50,
            output_dim: 10,
            n_samples: 5000,
            n_basis: 100,
            n_mixture: 10,
            shift_level: 0.0,
            seed,
        }
    }

    pub fn with_shift(&self, shift_level: f64) -> Self {
        SyntheticSpec {
            shift_level,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("n_samples", self.n_samples),
            ("n_basis", self.n_basis),
            ("n_mixture", self.n_mixture),
        ] {
            if v == 0 {
                return Err(FdaError::config(field, "must be positive"));
            }
        }
        if !(self.shift_level >= 0.0 && self.shift_level.is_finite()) {
            return Err(FdaError::config("shift_level", "must be a non-negative finite number"));
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::full_scale(0)
    }
}

/// Basis parameters for every output coordinate: `n_basis` centers and bandwidths each.
struct BasisSet {
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
}

fn basis_set(spec: &SyntheticSpec) -> BasisSet {
    let d = spec.input_dim;
    let count = spec.output_dim * spec.n_basis;
    let mut base = rng::stream(spec.seed, "basis", &[]);
    let mut shift = rng::stream(spec.seed, "basis-shift", &[]);
    let mut centers = Vec::with_capacity(count * d);
    let mut bandwidths = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..d {
            let p: f64 = base.random_range(-0.5..0.5);
            let u: f64 = shift.random_range(-0.5..0.5);
            centers.push(p + spec.shift_level * u);
        }
        let p: f64 = base.random_range(-0.5..0.5);
        let u: f64 = shift.random_range(-0.5..0.5);
        bandwidths.push((p + spec.shift_level * u).abs().max(MIN_BANDWIDTH));
    }
    BasisSet { centers, bandwidths }
}

/// Inputs from a mixture of `n_mixture` unit-covariance Gaussians.
fn mixture_inputs(spec: &SyntheticSpec) -> Vec<f64> {
    let d = spec.input_dim;
    let mut center_rng = rng::stream(spec.seed, "mixture-centers", &[]);
    let centers: Vec<f64> = (0..spec.n_mixture * d)
        .map(|_| center_rng.random_range(-0.5..0.5))
        .collect();
    let mut pick = rng::stream(spec.seed, "mixture-assign", &[]);
    let mut noise = rng::stream(spec.seed, "mixture-noise", &[]);
    let mut inputs = Vec::with_capacity(spec.n_samples * d);
    for _ in 0..spec.n_samples {
        let c = pick.random_range(0..spec.n_mixture);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut noise);
            inputs.push(centers[c * d + j] + z);
        }
    }
    inputs
}

/// Gaussian RBF `exp(−‖x−μ‖² / (d·(2σ)²))`.
///
/// The squared distance is averaged over input coordinates; without that, a
/// 50-dimensional unit-variance input sits ≈50 squared units from every center
/// and every basis function evaluates to ~e⁻⁵⁰.
fn rbf(x: &[f64], center: &[f64], bandwidth: f64) -> f64 {
    let mut dist = 0.0;
    for (a, b) in x.iter().zip(center) {
        let t = a - b;
        dist += t * t;
    }
    let width = 2.0 * bandwidth;
    (-dist / (x.len() as f64 * width * width)).exp()
}

/// Regression domain: `y_k(x) = Σ_i φ_{k,i}(x)` over `n_basis` functions per output.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.input_dim;
    let inputs = mixture_inputs(spec);
    let basis = basis_set(spec);
    let mut targets = Vec::with_capacity(spec.n_samples * spec.output_dim);
    for x in inputs.chunks(d) {
        for k in 0..spec.output_dim {
            let mut y = 0.0;
            for i in 0..spec.n_basis {
                let b = k * spec.n_basis + i;
                y += rbf(x, &basis.centers[b * d..(b + 1) * d], basis.bandwidths[b]);
            }
            targets.push(y);
        }
    }
    Dataset::new(
        format!("synthetic-shift{}", spec.shift_level),
        d,
        spec.output_dim,
        inputs,
        Targets::Regression(targets),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    #[serde(default = "BlobSpec::default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "BlobSpec::default_n_classes")]
    pub n_classes: usize,
    pub n_samples: usize,
    /// Class means are drawn from `U(−center_range, center_range)^input_dim`.
    #[serde(default = "BlobSpec::default_center_range")]
    pub center_range: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobSpec {
    fn default_input_dim() -> usize {
        20
    }
    fn default_n_classes() -> usize {
        10
    }
    fn default_center_range() -> f64 {
        2.0
    }

    pub fn new(n_samples: usize, seed: u64) -> Self {
        BlobSpec {
            input_dim: 20,
            n_classes: 10,
            n_samples,
            center_range: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FdaError::config("input_dim", "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(FdaError::config("n_classes", "need at least two classes"));
        }
        if self.n_samples == 0 {
            return Err(FdaError::config("n_samples", "must be positive"));
        }
        if !(self.center_range > 0.0 && self.center_range.is_finite()) {
            return Err(FdaError::config("center_range", "must be positive"));
        }
        Ok(())
    }
}

/// Balanced classification blobs; `draw` selects an independent sample stream so
/// several datasets can share one set of class means.
pub fn gen_blobs(spec: &BlobSpec, draw: u64) -> Result<Dataset> {
    spec.validate()?;
    let (d, k) = (spec.input_dim, spec.n_classes);
    let mut mean_rng = rng::stream(spec.seed, "blob-means", &[]);
    let means: Vec<f64> = (0..k * d)
        .map(|_| mean_rng.random_range(-spec.center_range..spec.center_range))
        .collect();
    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % k).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "blob-labels", &[draw]));
    let mut noise = rng::stream(spec.seed, "blob-noise", &[draw]);
    let mut inputs = Vec::with_capacity(spec.n_samples * d);
    for &y in &labels {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut noise);
            inputs.push(means[y * d + j] + z);
        }
    }
    Dataset::new(format!("blobs-{draw}"), d, k, inputs, Targets::Classification(labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftKind {
    /// Add i.i.d. `N(0, std²)` noise to every input entry.
    FeatureNoise { std: f64 },
    /// Recompose class groups: source takes η of the 3-class group and 1−η of the
    /// 7-class group; target takes the complements.
    LabelShift { eta: f64 },
}

/// Unknown fields are still rejected: `ShiftKind` denies whatever `seed` leaves over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTransform {
    #[serde(flatten)]
    pub kind: ShiftKind,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftTransform {
    pub fn feature_noise(std: f64, seed: u64) -> Self {
        ShiftTransform {
            kind: ShiftKind::FeatureNoise { std },
            seed,
        }
    }

    pub fn label_shift(eta: f64, seed: u64) -> Self {
        ShiftTransform {
            kind: ShiftKind::LabelShift { eta },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ShiftKind::FeatureNoise { std } if !(std >= 0.0 && std.is_finite()) => {
                Err(FdaError::config("std", "must be a non-negative finite number"))
            }
            ShiftKind::LabelShift { eta } if !(0.0..=0.5).contains(&eta) => {
                Err(FdaError::config("eta", format!("must lie in [0, 0.5], got {eta}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shifted {
    Single(Dataset),
    Split { source: Dataset, target: Dataset },
}

pub fn apply_shift(data: &Dataset, t: &ShiftTransform) -> Result<Shifted> {
    t.validate()?;
    match t.kind {
        ShiftKind::FeatureNoise { std } => feature_noise(data, std, t.seed).map(Shifted::Single),
        ShiftKind::LabelShift { eta } => {
            let (source, target) = label_shift(data, eta, t.seed)?;
            Ok(Shifted::Split { source, target })
        }
    }
}

pub fn feature_noise(data: &Dataset, std: f64, seed: u64) -> Result<Dataset> {
    ShiftTransform::feature_noise(std, seed).validate()?;
    if std == 0.0 {
        return Ok(data.clone());
    }
    let mut noise = rng::stream(seed, "feature-noise", &[]);
    let inputs = data
        .inputs()
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut noise);
            x + std * z
        })
        .collect();
    data.with_inputs(inputs)
}

/// Number of classes in the first label group.
pub const LABEL_GROUP_ONE: usize = 3;

/// Class-stratified label shift. Within each class, the source receives `⌊η·n_c⌋`
/// rows (first group) or `⌊(1−η)·n_c⌋` rows (second group) and the target receives
/// the complementary share of the remaining rows. Output rows are shuffled.
pub fn label_shift(data: &Dataset, eta: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    ShiftTransform::label_shift(eta, seed).validate()?;
    let labels = match data.targets() {
        Targets::Classification(l) => l,
        Targets::Regression(_) => return Err(FdaError::config("label_shift", "requires a classification dataset")),
    };
    if data.output_dim() != 10 {
        return Err(FdaError::config(
            "label_shift",
            format!("expects 10 classes (3 + 7 split), found {}", data.output_dim()),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.output_dim()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut source_rows = Vec::new();
    let mut target_rows = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng::stream(seed, "label-shift-class", &[c as u64]));
        let n = rows.len() as f64;
        let source_share = if c < LABEL_GROUP_ONE { eta } else { 1.0 - eta };
        let n_src = (source_share * n).floor() as usize;
        let n_tgt = ((1.0 - source_share) * n).floor() as usize;
        source_rows.extend_from_slice(&rows[..n_src]);
        target_rows.extend_from_slice(&rows[n_src..n_src + n_tgt]);
    }
    source_rows.shuffle(&mut rng::stream(seed, "label-shift-order", &[0]));
    target_rows.shuffle(&mut rng::stream(seed, "label-shift-order", &[1]));
    if source_rows.is_empty() || target_rows.is_empty() {
        return Err(FdaError::config("label_shift", "a split came out empty"));
    }
    let source = data
        .select(&source_rows)?
        .renamed(format!("{}-source-eta{eta}", data.name));
    let target = data
        .select(&target_rows)?
        .renamed(format!("{}-target-eta{eta}", data.name));
    Ok((source, target))
}

/// `n` rows drawn uniformly without replacement.
pub fn subsample(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > data.n() {
        return Err(FdaError::config(
            "n",
            format!("subsample size {n} outside [1, {}]", data.n()),
        ));
    }
    let rows = index::sample(&mut rng::stream(seed, "subsample", &[n as u64]), data.n(), n).into_vec();
    Ok(data.select(&rows)?.renamed(format!("{}-sub{n}", data.name)))
}

/// Seeded split into `(train, test)` with `test_fraction` of the rows held out.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(FdaError::config("test_fraction", "must lie strictly between 0 and 1"));
    }
    let n = data.n();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(FdaError::config("test_fraction", "split leaves one side empty"));
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::stream(seed, "train-test-split", &[]));
    let (test, train) = rows.split_at(n_test);
    Ok((
        data.select(train)?.renamed(format!("{}-train", data.name)),
        data.select(test)?.renamed(format!("{}-test", data.name)),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Regression,
    Classification,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TargetValues {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    name: String,
    kind: DatasetKind,
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: TargetValues,
}

pub fn dataset_to_json(data: &Dataset) -> String {
    let (kind, targets) = match data.targets() {
        Targets::Regression(t) => (DatasetKind::Regression, TargetValues::Values(t.clone())),
        Targets::Classification(t) => (DatasetKind::Classification, TargetValues::Labels(t.clone())),
    };
    let file = DatasetFile {
        name: data.name.clone(),
        kind,
        input_dim: data.input_dim(),
        output_dim: data.output_dim(),
        inputs: data.inputs().to_vec(),
        targets,
    };
    serde_json::to_string(&file).expect("dataset serialization cannot fail")
}

pub fn dataset_from_json(text: &str, origin: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|source| FdaError::Parse {
        path: origin.to_string(),
        source,
    })?;
    let targets = match (file.kind, file.targets) {
        (DatasetKind::Classification, TargetValues::Labels(l)) => Targets::Classification(l),
        (DatasetKind::Classification, TargetValues::Values(_)) => {
            return Err(FdaError::config(
                "targets",
                "classification labels must be non-negative integers",
            ))
        }
        (DatasetKind::Regression, TargetValues::Values(v)) => Targets::Regression(v),
        (DatasetKind::Regression, TargetValues::Labels(l)) => {
            Targets::Regression(l.into_iter().map(|v| v as f64).collect())
        }
    };
    Dataset::new(file.name, file.input_dim, file.output_dim, file.inputs, targets)
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_json(data)).map_err(|e| FdaError::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FdaError::io(path, e))?;
    dataset_from_json(&text, &path.display().to_string())
}
