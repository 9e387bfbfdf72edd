//! Monte-Carlo unbiasedness check of the batch estimators in a Gaussian gradient
//! model: each batch gradient is `g^j = v + s·ε_j` with `ε_j ~ N(0, I_m)`.
//!
//! Ground truth: `σ² = m·s²/B`, `d² = ‖u − v‖²`, and `τ²d² = ‖v − ⟨v, û⟩û‖²`, where
//! `u` is the source gradient (`‖v‖²` when `u = 0`, since nothing is projected out).

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoweight::{estimate_d2, estimate_sigma2, estimate_tau2d2, BatchGradients};
use crate::error::{FdaError, Result};
use crate::linalg::ParamVector;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorValidationConfig {
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Population target gradient `v`; its length sets the dimension.
    #[serde(default = "default_target")]
    pub target_mean: Vec<f64>,
    /// Source gradient `u`.
    #[serde(default = "default_source")]
    pub source: Vec<f64>,
    /// Largest accepted |z|-score.
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batches() -> usize {
    8
}
fn default_trials() -> usize {
    100_000
}
fn default_noise() -> f64 {
    1.0
}
fn default_target() -> Vec<f64> {
    vec![1.0, -0.5, 0.25, 2.0]
}
fn default_source() -> Vec<f64> {
    vec![0.3, 0.4, -0.2, 0.1]
}
fn default_z() -> f64 {
    4.0
}

impl Default for EstimatorValidationConfig {
    fn default() -> Self {
        EstimatorValidationConfig {
            batches: default_batches(),
            trials: default_trials(),
            noise_std: default_noise(),
            target_mean: default_target(),
            source: default_source(),
            z_threshold: default_z(),
            seed: 0,
        }
    }
}

impl EstimatorValidationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches < 2 {
            return Err(FdaError::config(
                "batches",
                format!("need at least 2 batches, got {}", self.batches),
            ));
        }
        if self.trials < 2 {
            return Err(FdaError::config("trials", "need at least 2 trials"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(FdaError::config("noise_std", "must be positive"));
        }
        if self.target_mean.is_empty() {
            return Err(FdaError::config("target_mean", "must not be empty"));
        }
        if self.source.len() != self.target_mean.len() {
            return Err(FdaError::config(
                "source",
                format!(
                    "length {} differs from target_mean length {}",
                    self.source.len(),
                    self.target_mean.len()
                ),
            ));
        }
        if self.z_threshold.is_nan() || self.z_threshold <= 0.0 {
            return Err(FdaError::config("z_threshold", "must be positive"));
        }
        Ok(())
    }

    /// `(σ², d², τ²d²)` for this model.
    pub fn truth(&self) -> (f64, f64, f64) {
        let m = self.target_mean.len() as f64;
        let sigma2 = m * self.noise_std * self.noise_std / self.batches as f64;
        let d2: f64 = self
            .source
            .iter()
            .zip(&self.target_mean)
            .map(|(u, v)| (u - v).powi(2))
            .sum();
        let uu: f64 = self.source.iter().map(|u| u * u).sum();
        let vv: f64 = self.target_mean.iter().map(|v| v * v).sum();
        let uv: f64 = self.source.iter().zip(&self.target_mean).map(|(u, v)| u * v).sum();
        let tau2d2 = if uu > 0.0 { vv - uv * uv / uu } else { vv };
        (sigma2, d2, tau2d2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCheck {
    pub name: String,
    pub mean: f64,
    pub truth: f64,
    pub std_error: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<EstimatorCheck>,
    /// The source gradient was too small to project onto.
    pub degenerate_source: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn validate_estimators(cfg: &EstimatorValidationConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    let v = ParamVector::from_flat(cfg.target_mean.clone())?;
    let u = vec![ParamVector::from_flat(cfg.source.clone())?];
    let samples: Vec<([f64; 3], usize)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(cfg.seed, "estimator-trial", &[t as u64]);
            let updates = (0..cfg.batches)
                .map(|_| {
                    let noise: Vec<f64> = (0..v.total_dim())
                        .map(|_| {
                            cfg.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                        })
                        .collect();
                    v.add(&ParamVector::from_flat(noise)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = BatchGradients::from_updates(updates)?;
            let tau = estimate_tau2d2(&u, &batch)?;
            Ok((
                [estimate_sigma2(&batch)?, estimate_d2(&u, &batch)?, tau.value],
                tau.degenerate_atoms,
            ))
        })
        .collect::<Result<_>>()?;

    let (s2, d2, t2) = cfg.truth();
    let n = cfg.trials as f64;
    let checks = ["sigma2", "d2", "tau2d2"]
        .iter()
        .zip([s2, d2, t2])
        .enumerate()
        .map(|(k, (name, truth))| {
            let mean = samples.iter().map(|s| s.0[k]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.0[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let std_error = (var / n).sqrt();
            let z = if std_error > 0.0 {
                (mean - truth) / std_error
            } else {
                0.0
            };
            EstimatorCheck {
                name: name.to_string(),
                mean,
                truth,
                std_error,
                z,
                pass: z.abs() <= cfg.z_threshold,
            }
        })
        .collect();
    Ok(ValidationReport {
        checks,
        degenerate_source: samples.iter().any(|s| s.1 > 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_passes() {
        let cfg = EstimatorValidationConfig {
            trials: 4000,
            ..Default::default()
        };
        let report = validate_estimators(&cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(!report.degenerate_source);
    }

    #[test]
    fn zero_source_is_flagged_not_fatal() {
        let cfg = EstimatorValidationConfig {
            trials: 2000,
            source: vec![0.0; 4],
            ..Default::default()
        };
        let report = validate_estimators(&cfg).unwrap();
        assert!(report.degenerate_source);
        assert!(report.checks.iter().all(|c| c.mean.is_finite()));
    }

    #[test]
    fn single_batch_is_rejected() {
        let cfg = EstimatorValidationConfig {
            batches: 1,
            ..Default::default()
        };
        assert!(matches!(validate_estimators(&cfg), Err(FdaError::Config { .. })));
    }

    #[test]
    fn truth_of_orthogonal_part() {
        let cfg = EstimatorValidationConfig {
            target_mean: vec![3.0, 4.0],
            source: vec![1.0, 0.0],
            ..Default::default()
        };
        let (s2, d2, t2) = cfg.truth();
        assert_eq!(s2, 2.0 / 8.0);
        assert_eq!(d2, 4.0 + 16.0);
        assert_eq!(t2, 16.0);
    }
}
