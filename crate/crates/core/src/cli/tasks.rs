//! Building source/target datasets for an experiment, and the semi-synthetic sweep.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationRule;
use crate::datagen::{
    feature_noise, gen_blobs, gen_synthetic, label_shift, read_dataset, subsample, BlobSpec, ShiftKind, ShiftTransform,
    SyntheticSpec,
};
use crate::error::{FdaError, Result};
use crate::fedsim::{run_experiment, FederationConfig, RoundReport};
use crate::model::Dataset;
use crate::rng;

/// Everything a federated run trains and evaluates on.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub sources: Vec<Dataset>,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl Task {
    /// All datasets with file-friendly names, sources first.
    pub fn named(&self) -> Vec<(String, &Dataset)> {
        let mut out: Vec<(String, &Dataset)> = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("source_{}", i + 1), d))
            .collect();
        out.push(("target_train".into(), &self.target_train));
        out.push(("target_test".into(), &self.target_test));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSpec {
    Synthetic(SyntheticTask),
    Blobs(BlobTask),
    Files(FileTask),
}

/// Regression domains sharing the target's inputs. Sources are the non-test rows of
/// each shifted domain; the target sample is drawn from those same rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub base: SyntheticSpec,
    pub source_shifts: Vec<f64>,
    pub target_size: usize,
    pub test_size: usize,
}

/// Gaussian-blob classification with an optional shift between sources and target.
///
/// Feature noise is applied to the target client's data only. A label shift splits
/// one large draw into a source part (split evenly among clients) and a target part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobTask {
    #[serde(default = "default_blob_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_center_range")]
    pub center_range: f64,
    #[serde(default = "default_n_sources")]
    pub n_sources: usize,
    #[serde(default = "default_source_size")]
    pub source_size: usize,
    #[serde(default = "default_target_size")]
    pub target_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub shift: Option<ShiftTransform>,
}

fn default_blob_dim() -> usize {
    20
}
fn default_classes() -> usize {
    10
}
fn default_center_range() -> f64 {
    2.0
}
fn default_n_sources() -> usize {
    9
}
fn default_source_size() -> usize {
    500
}
fn default_target_size() -> usize {
    100
}
fn default_test_size() -> usize {
    1000
}

impl Default for BlobTask {
    fn default() -> Self {
        BlobTask {
            input_dim: 20,
            n_classes: 10,
            center_range: 2.0,
            n_sources: 9,
            source_size: 500,
            target_size: 100,
            test_size: 1000,
            shift: None,
        }
    }
}

/// Pre-generated datasets; relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTask {
    pub sources: Vec<PathBuf>,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

impl TaskSpec {
    /// Datasets for this task. `seed` drives every sampling step; `base_dir` resolves
    /// relative file paths.
    pub fn build(&self, seed: u64, base_dir: &Path) -> Result<Task> {
        match self {
            TaskSpec::Synthetic(t) => t.build(seed),
            TaskSpec::Blobs(t) => t.build(seed),
            TaskSpec::Files(t) => t.load(base_dir),
        }
    }
}

impl SyntheticTask {
    pub fn build(&self, seed: u64) -> Result<Task> {
        let base = self.base.with_shift(0.0);
        base.validate()?;
        if self.test_size == 0 || self.test_size >= base.n_samples {
            return Err(FdaError::config("test_size", "must leave some training rows"));
        }
        let domain = gen_synthetic(&base)?;
        let mut rows: Vec<usize> = (0..domain.n()).collect();
        rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng::stream(seed, "task-split", &[]));
        let (test_rows, pool_rows) = rows.split_at(self.test_size);
        let pool = domain.select(pool_rows)?;
        let sources = self
            .source_shifts
            .iter()
            .map(|&s| {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(FdaError::config("source_shifts", format!("invalid shift {s}")));
                }
                Ok(gen_synthetic(&base.with_shift(s))?
                    .select(pool_rows)?
                    .renamed(format!("source-shift{s}")))
            })
            .collect::<Result<_>>()?;
        Ok(Task {
            sources,
            target_train: subsample(&pool, self.target_size, seed)?.renamed("target-train"),
            target_test: domain.select(test_rows)?.renamed("target-test"),
        })
    }
}

impl BlobTask {
    fn spec(&self, n_samples: usize, seed: u64) -> BlobSpec {
        BlobSpec {
            input_dim: self.input_dim,
            n_classes: self.n_classes,
            n_samples,
            center_range: self.center_range,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        for (field, v) in [
            ("n_sources", self.n_sources),
            ("source_size", self.source_size),
            ("target_size", self.target_size),
            ("test_size", self.test_size),
        ] {
            if v == 0 {
                return Err(FdaError::config(field, "must be positive"));
            }
        }
        if let Some(s) = &self.shift {
            s.validate()?;
        }
        self.spec(1, 0).validate()
    }

    pub fn build(&self, seed: u64) -> Result<Task> {
        self.check()?;
        let n_target = self.target_size + self.test_size;
        match self.shift.map(|s| (s.kind, s.seed)) {
            None | Some((ShiftKind::FeatureNoise { .. }, _)) => {
                let sources = (0..self.n_sources)
                    .map(|i| {
                        gen_blobs(&self.spec(self.source_size, seed), i as u64)
                            .map(|d| d.renamed(format!("source-{}", i + 1)))
                    })
                    .collect::<Result<_>>()?;
                let mut target = gen_blobs(&self.spec(n_target, seed), u64::MAX)?;
                if let Some(ShiftTransform {
                    kind: ShiftKind::FeatureNoise { std },
                    seed: noise_seed,
                }) = self.shift
                {
                    target = feature_noise(&target, std, rng::stream_key(seed, "target-noise", &[noise_seed]))?;
                }
                self.split_target(sources, &target)
            }
            Some((ShiftKind::LabelShift { eta }, shift_seed)) => {
                let total = 2 * (self.n_sources * self.source_size + n_target);
                let pool = gen_blobs(&self.spec(total, seed), 0)?;
                let (source_part, target_part) =
                    label_shift(&pool, eta, rng::stream_key(seed, "label-shift", &[shift_seed]))?;
                let need = self.n_sources * self.source_size;
                if source_part.n() < need || target_part.n() < n_target {
                    return Err(FdaError::config(
                        "label_shift",
                        "shifted pool too small for the requested sizes",
                    ));
                }
                let sources = (0..self.n_sources)
                    .map(|i| {
                        let rows: Vec<usize> = (i * self.source_size..(i + 1) * self.source_size).collect();
                        source_part
                            .select(&rows)
                            .map(|d| d.renamed(format!("source-{}", i + 1)))
                    })
                    .collect::<Result<_>>()?;
                self.split_target(sources, &target_part)
            }
        }
    }

    fn split_target(&self, sources: Vec<Dataset>, target: &Dataset) -> Result<Task> {
        let train: Vec<usize> = (0..self.target_size).collect();
        let test: Vec<usize> = (self.target_size..self.target_size + self.test_size).collect();
        Ok(Task {
            sources,
            target_train: target.select(&train)?.renamed("target-train"),
            target_test: target.select(&test)?.renamed("target-test"),
        })
    }
}

impl FileTask {
    pub fn load(&self, base_dir: &Path) -> Result<Task> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        Ok(Task {
            sources: self
                .sources
                .iter()
                .map(|p| read_dataset(resolve(p)))
                .collect::<Result<_>>()?,
            target_train: read_dataset(resolve(&self.target_train))?,
            target_test: read_dataset(resolve(&self.target_test))?,
        })
    }
}

/// Sweep of shift strengths × rules × seeds on the blob task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSyntheticConfig {
    /// Task layout; its `shift` is replaced by each entry of `shifts`.
    #[serde(default)]
    pub task: BlobTask,
    pub shifts: Vec<ShiftTransform>,
    /// Rules to compare; the federation's own rule is used when this is empty.
    #[serde(default)]
    pub rules: Vec<AggregationRule>,
    pub federation: FederationConfig,
    /// One full sweep per seed; each seed draws new blobs and a new training order.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticRow {
    pub shift: ShiftTransform,
    pub rule: String,
    pub seed: u64,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSyntheticResult {
    pub rows: Vec<SemiSyntheticRow>,
}

/// Human-readable shift label, e.g. `feature_noise(0.4)`.
pub fn shift_label(s: &ShiftTransform) -> String {
    match s.kind {
        ShiftKind::FeatureNoise { std } => format!("feature_noise({std})"),
        ShiftKind::LabelShift { eta } => format!("label_shift({eta})"),
    }
}

impl SemiSyntheticConfig {
    pub fn rules(&self) -> Vec<AggregationRule> {
        if self.rules.is_empty() {
            vec![self.federation.rule.clone()]
        } else {
            self.rules.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shifts.is_empty() {
            return Err(FdaError::config("shifts", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(FdaError::config("seeds", "must not be empty"));
        }
        for s in &self.shifts {
            s.validate()?;
        }
        for rule in self.rules() {
            FederationConfig {
                rule,
                ..self.federation.clone()
            }
            .validate(self.task.n_sources, self.task.target_size)?;
        }
        Ok(())
    }
}

impl SemiSyntheticResult {
    /// Mean final accuracy of `rule` under `shift` across seeds.
    pub fn mean_accuracy(&self, shift: &ShiftTransform, rule: &str) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.shift == *shift && r.rule == rule)
            .filter_map(|r| r.final_test_accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Runs every (shift, seed, rule) combination; rows come out in that nesting order.
pub fn run_semi_synthetic(cfg: &SemiSyntheticConfig) -> Result<SemiSyntheticResult> {
    cfg.validate()?;
    let rules = cfg.rules();
    let jobs: Vec<(ShiftTransform, u64)> = cfg
        .shifts
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (*s, seed)))
        .collect();
    let rows: Vec<Vec<SemiSyntheticRow>> = jobs
        .par_iter()
        .map(|(shift, seed)| {
            let task = BlobTask {
                shift: Some(*shift),
                ..cfg.task.clone()
            }
            .build(*seed)?;
            rules
                .iter()
                .map(|rule| {
                    let fed = FederationConfig {
                        rule: rule.clone(),
                        seed: *seed,
                        ..cfg.federation.clone()
                    };
                    let reports = run_experiment(&fed, &task.sources, &task.target_train, &task.target_test)?;
                    let last = final_report(&reports)?;
                    Ok(SemiSyntheticRow {
                        shift: *shift,
                        rule: rule.label(),
                        seed: *seed,
                        final_test_loss: last.target_test_loss,
                        final_test_accuracy: last.target_test_accuracy,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(SemiSyntheticResult {
        rows: rows.into_iter().flatten().collect(),
    })
}

pub(crate) fn final_report(reports: &[RoundReport]) -> Result<&RoundReport> {
    reports
        .last()
        .ok_or_else(|| FdaError::Numeric("experiment produced no rounds".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_task_keeps_test_rows_out_of_sources() {
        let t = SyntheticTask {
            base: SyntheticSpec {
                input_dim: 3,
                output_dim: 2,
                n_samples: 60,
                n_basis: 4,
                n_mixture: 2,
                shift_level: 0.0,
                seed: 1,
            },
            source_shifts: vec![0.0, 0.5],
            target_size: 10,
            test_size: 20,
        };
        let task = t.build(4).unwrap();
        assert_eq!(task.sources[0].n(), 40);
        assert_eq!(task.target_test.n(), 20);
        assert_eq!(task.target_train.n(), 10);
        let test_rows: Vec<&[f64]> = (0..20).map(|i| task.target_test.row(i)).collect();
        for i in 0..40 {
            assert!(!test_rows.contains(&task.sources[0].row(i)));
        }
        assert_eq!(t.build(4).unwrap(), task);
    }

    #[test]
    fn blob_task_shapes_and_shifts() {
        let small = BlobTask {
            n_sources: 3,
            source_size: 40,
            target_size: 20,
            test_size: 30,
            ..BlobTask::default()
        };
        let task = small.build(2).unwrap();
        assert_eq!(task.sources.len(), 3);
        assert!(task.sources.iter().all(|d| d.n() == 40));
        assert_eq!((task.target_train.n(), task.target_test.n()), (20, 30));

        let noisy = BlobTask {
            shift: Some(ShiftTransform::feature_noise(0.5, 1)),
            ..small.clone()
        }
        .build(2)
        .unwrap();
        assert_eq!(noisy.sources, task.sources);
        assert_ne!(noisy.target_train, task.target_train);

        let shifted = BlobTask {
            shift: Some(ShiftTransform::label_shift(0.0, 1)),
            ..small
        }
        .build(2)
        .unwrap();
        let labels = |d: &Dataset| (0..d.n()).map(|i| d.label(i).unwrap()).collect::<Vec<_>>();
        assert!(labels(&shifted.target_train).iter().all(|&y| y < 3));
        assert!(labels(&shifted.sources[0]).iter().all(|&y| y >= 3));
    }
}
