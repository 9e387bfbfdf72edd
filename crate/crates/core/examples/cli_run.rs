//! Drive the `fda` command line in-process: write a config, run it, read the reports.

use std::error::Error;
use std::fs;

use fda_core::cli::main_with_args;

const CONFIG: &str = r#"{
    "kind": "single_run",
    "seed": 7,
    "task": {
        "type": "synthetic",
        "base": {"input_dim": 6, "output_dim": 2, "n_samples": 300, "n_basis": 8, "n_mixture": 3},
        "source_shifts": [0.2, 0.6],
        "target_size": 40,
        "test_size": 100
    },
    "federation": {
        "rounds": 4, "lr_s": 0.05, "batch_s": 32, "batch_t": 8, "hidden_dim": 8,
        "rule": {"kind": "fed_da", "betas": "auto"}
    }
}"#;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.json");
    fs::write(&config, CONFIG)?;
    let out = dir.path().join("out");
    let args = [
        "fda",
        "run",
        "--config",
        config.to_str().ok_or("path")?,
        "--out",
        out.to_str().ok_or("path")?,
    ];
    let code = main_with_args(args);
    println!("exit code {code}");
    print!("{}", fs::read_to_string(out.join("rounds.csv"))?);

    fs::write(&config, CONFIG.replace("\"rounds\": 4", "\"rounds\": 0"))?;
    println!("zero rounds -> exit code {}", main_with_args(args));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
