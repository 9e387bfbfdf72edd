//! Exact domain distance, target variance and Monte-Carlo Δ² for each rule.

use std::error::Error;

use fda_core::aggregate::AggregationRule;
use fda_core::autoweight::compute_betas;
use fda_core::datagen::{gen_synthetic, subsample, SyntheticSpec};
use fda_core::linalg::PiMeasure;
use fda_core::metrics::{exact_distance, exact_sigma2, monte_carlo_delta2, GradientCache, MonteCarlo};
use fda_core::model::{Arch, Model};
use fda_core::rng;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let spec = SyntheticSpec {
        input_dim: 8,
        output_dim: 2,
        n_samples: 600,
        n_basis: 10,
        n_mixture: 4,
        shift_level: 0.0,
        seed: 3,
    };
    let target = subsample(&gen_synthetic(&spec)?, 300, 1)?;
    let model = Model::init(Arch::MlpRegression, 8, 16, 2, &mut rng::stream(3, "example-init", &[]))?;
    let pi = PiMeasure::point_mass(model.params().clone());
    let n = 20;
    let sigma2 = exact_sigma2(&target, n, &model, &pi)?;
    let mc = MonteCarlo::new(2_000, 9);

    println!("target variance at n={n}: {sigma2:.4}");
    println!(
        "{:>6} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "shift", "d", "SourceOnly", "FedDA(.5)", "FedGP(.5)", "beta_DA*"
    );
    for shift in [0.0, 0.3, 0.6, 1.0] {
        let source = gen_synthetic(&spec.with_shift(shift))?;
        let d = exact_distance(&source, &target, &model, &pi)?;
        let cache = GradientCache::new(std::slice::from_ref(&source), &target, &model, &pi)?;
        let row: Vec<f64> = [
            AggregationRule::source_only(),
            AggregationRule::fed_da(0.5),
            AggregationRule::fed_gp(0.5),
        ]
        .iter()
        .map(|r| monte_carlo_delta2(r, &[0.5], &cache, n, &mc).map(|x| x.delta2))
        .collect::<Result<_, _>>()?;
        let best = compute_betas(sigma2, &[d * d], &[cache.orthogonal_sq(0)?])?;
        println!(
            "{shift:>6.1} {d:>8.4} {:>10.4} {:>10.4} {:>10.4} {:>10.3}",
            row[0],
            row[1],
            row[2],
            best.betas_da()[0]
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
