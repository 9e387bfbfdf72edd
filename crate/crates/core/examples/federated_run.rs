//! One federated run on shifted blobs with auto-weighted FedGP.

use std::error::Error;

use fda_core::aggregate::AggregationRule;
use fda_core::cli::tasks::BlobTask;
use fda_core::datagen::ShiftTransform;
use fda_core::fedsim::{run_experiment, FederationConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let task = BlobTask {
        n_sources: 3,
        source_size: 300,
        target_size: 60,
        test_size: 400,
        shift: Some(ShiftTransform::feature_noise(0.8, 2)),
        ..BlobTask::default()
    }
    .build(2)?;
    let cfg = FederationConfig {
        seed: 2,
        lr_t: Some(0.1),
        ..FederationConfig::new(AggregationRule::fed_gp_auto(), 8, 0.5, 64, 16)
    };
    let reports = run_experiment(&cfg, &task.sources, &task.target_train, &task.target_test)?;
    println!("{:>5} {:>22} {:>9} {:>7}", "round", "betas", "loss", "acc");
    for r in &reports {
        let betas: Vec<String> = r.betas_used.iter().map(|b| format!("{b:.2}")).collect();
        println!(
            "{:>5} {:>22} {:>9.4} {:>7.3}",
            r.round,
            betas.join(" "),
            r.target_test_loss,
            r.target_test_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
