//! A 2×2 predicted-versus-actual winner grid on small synthetic domains.

use std::error::Error;

use fda_core::datagen::SyntheticSpec;
use fda_core::metrics::{predicted_vs_actual_grid, GridConfig, GridTraining};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let cfg = GridConfig {
        base: SyntheticSpec {
            input_dim: 10,
            output_dim: 3,
            n_samples: 800,
            n_basis: 20,
            n_mixture: 4,
            shift_level: 0.0,
            seed: 4,
        },
        shift_levels: vec![0.0, 1.0],
        target_sizes: vec![400, 10],
        test_size: 200,
        trials: 1,
        resamples: 50,
        high_shift_from: 1,
        training: GridTraining {
            rounds: 5,
            hidden_dim: 16,
            ..GridTraining::default()
        },
        ..GridConfig::full(4)
    };
    let result = predicted_vs_actual_grid(&cfg)?;
    for c in &result.cells {
        println!(
            "shift {:.1} n_T {:>4}: d={:.3} sigma={:.3} predicted {:<11} actual {:<11}",
            c.shift_level,
            c.target_size,
            c.d_pi,
            c.sigma_pi,
            result.rule_labels[c.predicted_winner],
            result.rule_labels[c.actual_winner]
        );
    }
    println!("agreement {:.2}", result.agreement_rate());
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    println!("{}", String::from_utf8(csv)?.lines().next().unwrap_or_default());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
