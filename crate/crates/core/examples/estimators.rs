//! Monte-Carlo check that the batch estimators of σ², d² and τ²d² are unbiased.

use std::error::Error;

use fda_core::cli::validate::{validate_estimators, EstimatorValidationConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let cfg = EstimatorValidationConfig {
        trials: 20_000,
        seed: 5,
        ..EstimatorValidationConfig::default()
    };
    let report = validate_estimators(&cfg)?;
    println!("{:<10} {:>10} {:>10} {:>8}", "estimator", "mean", "truth", "z");
    for c in &report.checks {
        println!("{:<10} {:>10.5} {:>10.5} {:>8.2}", c.name, c.mean, c.truth, c.z);
    }
    println!("all within {} s.e.: {}", cfg.z_threshold, report.passed());

    // A zero source gradient has no direction to project onto.
    let degenerate = EstimatorValidationConfig {
        source: vec![0.0; 4],
        trials: 2_000,
        ..cfg
    };
    let report = validate_estimators(&degenerate)?;
    println!("zero source flagged as degenerate: {}", report.degenerate_source);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
