//! Final accuracy of each rule as target-side feature noise grows.

use std::error::Error;

use fda_core::aggregate::AggregationRule;
use fda_core::cli::tasks::{run_semi_synthetic, shift_label, BlobTask, SemiSyntheticConfig};
use fda_core::datagen::ShiftTransform;
use fda_core::fedsim::FederationConfig;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let rules = vec![
        AggregationRule::source_only(),
        AggregationRule::target_only(),
        AggregationRule::fed_da(0.5),
        AggregationRule::fed_gp(0.5),
    ];
    let cfg = SemiSyntheticConfig {
        task: BlobTask {
            n_sources: 3,
            source_size: 200,
            target_size: 50,
            test_size: 300,
            ..BlobTask::default()
        },
        shifts: [0.0, 0.8]
            .iter()
            .map(|&s| ShiftTransform::feature_noise(s, 0))
            .collect(),
        rules: rules.clone(),
        federation: FederationConfig {
            lr_t: Some(0.1),
            ..FederationConfig::new(AggregationRule::fed_da(0.5), 6, 0.5, 64, 16)
        },
        seeds: vec![0],
    };
    let result = run_semi_synthetic(&cfg)?;
    for shift in &cfg.shifts {
        let accs: Vec<String> = rules
            .iter()
            .map(|r| {
                format!(
                    "{}={:.3}",
                    r.label(),
                    result.mean_accuracy(shift, &r.label()).unwrap_or(f64::NAN)
                )
            })
            .collect();
        println!("{:<20} {}", shift_label(shift), accs.join("  "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
