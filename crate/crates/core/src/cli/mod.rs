//! Command-line front end: JSON experiment configs, the `generate`, `run`, `grid`
//! and `validate-estimators` commands, and their report writers.
//!
//! Every command is a pure function of the config file and seed: outputs are
//! byte-identical across runs and thread counts.

pub mod tasks;
pub mod validate;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{gen_synthetic, write_dataset};
use crate::error::{FdaError, Result};
use crate::fedsim::{run_experiment, FederationConfig, RoundReport};
use crate::metrics::{predicted_vs_actual_grid, GridConfig};

pub use tasks::{
    run_semi_synthetic, shift_label, BlobTask, FileTask, SemiSyntheticConfig, SemiSyntheticResult, SemiSyntheticRow,
    SyntheticTask, Task, TaskSpec,
};
pub use validate::{validate_estimators, EstimatorCheck, EstimatorValidationConfig, ValidationReport};

/// Environment variable that overrides the output directory (below `--out`).
pub const OUT_DIR_ENV: &str = "FDA_OUT_DIR";

/// Exit code for a failed statistical check.
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    SingleRun(SingleRunConfig),
    SyntheticGrid(GridExperiment),
    SemiSynthetic(SemiSyntheticExperiment),
    EstimatorValidation(EstimatorExperiment),
}

/// One federated training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleRunConfig {
    pub task: TaskSpec,
    /// `federation.seed` is replaced by the top-level `seed`.
    pub federation: FederationConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridExperiment {
    pub grid: GridConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSyntheticExperiment {
    pub sweep: SemiSyntheticConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorExperiment {
    #[serde(default)]
    pub validation: EstimatorValidationConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| FdaError::Parse {
            path: origin.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FdaError::io(path.display().to_string(), e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    /// Replaces every seed the experiment draws from.
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::SingleRun(c) => c.seed = seed,
            ExperimentConfig::SyntheticGrid(c) => c.grid.seed = seed,
            ExperimentConfig::SemiSynthetic(c) => c.sweep.seeds = vec![seed],
            ExperimentConfig::EstimatorValidation(c) => c.validation.seed = seed,
        }
    }

    pub fn out_dir(&self) -> Option<&Path> {
        match self {
            ExperimentConfig::SingleRun(c) => c.out_dir.as_deref(),
            ExperimentConfig::SyntheticGrid(c) => c.out_dir.as_deref(),
            ExperimentConfig::SemiSynthetic(c) => c.out_dir.as_deref(),
            ExperimentConfig::EstimatorValidation(c) => c.out_dir.as_deref(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ExperimentConfig::SingleRun(_) => "single_run",
            ExperimentConfig::SyntheticGrid(_) => "synthetic_grid",
            ExperimentConfig::SemiSynthetic(_) => "semi_synthetic",
            ExperimentConfig::EstimatorValidation(_) => "estimator_validation",
        }
    }
}

impl SingleRunConfig {
    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            ..self.federation.clone()
        }
    }
}

/// Where a command writes, plus the config directory for relative dataset paths.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: ExperimentConfig,
    pub config_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Invocation {
    /// Loads `config_path`, applies the seed override and resolves the output
    /// directory: `out`, then `$FDA_OUT_DIR`, then the config's `out_dir`, then `fda-out`.
    pub fn new(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed {
            config.set_seed(s);
        }
        let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out_dir = out
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| config.out_dir().map(|p| config_dir.join(p)))
            .unwrap_or_else(|| PathBuf::from("fda-out"));
        Ok(Invocation {
            config,
            config_dir,
            out_dir,
        })
    }

    fn create_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| FdaError::io(self.out_dir.display().to_string(), e))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| FdaError::io(parent.display().to_string(), e))?;
        }
        fs::write(&path, bytes).map_err(|e| FdaError::io(path.display().to_string(), e))?;
        Ok(path)
    }

    fn write_config(&self) -> Result<PathBuf> {
        self.write("config.json", self.config.to_json().as_bytes())
    }
}

/// What a command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// One-line summaries for the terminal.
    pub summary: Vec<String>,
    /// A statistical check ran and failed.
    pub check_failed: bool,
}

impl Outcome {
    fn new(files: Vec<PathBuf>, summary: Vec<String>) -> Self {
        Outcome {
            files,
            summary,
            check_failed: false,
        }
    }
}

fn wrong_kind(command: &str, config: &ExperimentConfig, expected: &str) -> FdaError {
    FdaError::config(
        "kind",
        format!("`{command}` expects {expected}, config has kind \"{}\"", config.kind()),
    )
}

/// Writes every dataset the experiment would train or test on.
pub fn cmd_generate(inv: &Invocation) -> Result<Outcome> {
    let mut files = Vec::new();
    match &inv.config {
        ExperimentConfig::SingleRun(c) => {
            let task = c.task.build(c.seed, &inv.config_dir)?;
            inv.create_out_dir()?;
            for (name, data) in task.named() {
                files.push(write_named(inv, &format!("datasets/{name}.json"), data)?);
            }
        }
        ExperimentConfig::SemiSynthetic(c) => {
            c.sweep.validate()?;
            inv.create_out_dir()?;
            for shift in &c.sweep.shifts {
                for &seed in &c.sweep.seeds {
                    let task = BlobTask {
                        shift: Some(*shift),
                        ..c.sweep.task.clone()
                    }
                    .build(seed)?;
                    for (name, data) in task.named() {
                        let rel = format!("datasets/{}/seed_{seed}/{name}.json", shift_label(shift));
                        files.push(write_named(inv, &rel, data)?);
                    }
                }
            }
        }
        ExperimentConfig::SyntheticGrid(c) => {
            c.grid.validate()?;
            inv.create_out_dir()?;
            for (i, &level) in c.grid.shift_levels.iter().enumerate() {
                let data = gen_synthetic(&c.grid.base.with_shift(level))?;
                files.push(write_named(inv, &format!("datasets/domain_{}.json", i + 1), &data)?);
            }
        }
        ExperimentConfig::EstimatorValidation(_) => {
            return Err(FdaError::config(
                "kind",
                "estimator_validation has no datasets to generate",
            ));
        }
    }
    files.push(inv.write_config()?);
    let summary = vec![format!("wrote {} files to {}", files.len(), inv.out_dir.display())];
    Ok(Outcome::new(files, summary))
}

fn write_named(inv: &Invocation, rel: &str, data: &crate::model::Dataset) -> Result<PathBuf> {
    let path = inv.out_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| FdaError::io(parent.display().to_string(), e))?;
    }
    write_dataset(&path, data)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rule: String,
    pub rounds: usize,
    pub n_sources: usize,
    pub target_train_size: usize,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub best_test_loss: f64,
    pub final_betas: Vec<f64>,
}

/// Per-round CSV: `round, rule, beta_1..N`, then `sigma2_hat, d2_hat_1..N,
/// tau2d2_hat_1..N` for auto-weighted rules, then `test_loss, test_acc`.
///
/// Beta columns appear only for rules that use betas; `test_acc` is empty for
/// regression tasks.
pub fn write_rounds_csv<W: Write>(
    out: W,
    fed: &FederationConfig,
    n_sources: usize,
    reports: &[RoundReport],
) -> Result<()> {
    let label = fed.rule.label();
    let betas = fed.rule.uses_betas();
    let auto = fed.auto_weight();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["round".to_string(), "rule".to_string()];
    if betas {
        header.extend((1..=n_sources).map(|i| format!("beta_{i}")));
    }
    if auto {
        header.push("sigma2_hat".into());
        header.extend((1..=n_sources).map(|i| format!("d2_hat_{i}")));
        header.extend((1..=n_sources).map(|i| format!("tau2d2_hat_{i}")));
    }
    header.push("test_loss".into());
    header.push("test_acc".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.round.to_string(), label.clone()];
        if betas {
            row.extend(r.betas_used.iter().map(f64::to_string));
        }
        if auto {
            let stats = r
                .delta_stats
                .as_ref()
                .ok_or_else(|| FdaError::Numeric(format!("round {} has no estimates", r.round)))?;
            row.push(stats.sigma2_hat.to_string());
            row.extend(stats.sources.iter().map(|s| s.d2_hat.to_string()));
            row.extend(stats.sources.iter().map(|s| s.tau2d2_hat.to_string()));
        }
        row.push(r.target_test_loss.to_string());
        row.push(r.target_test_accuracy.map(|a| a.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| FdaError::io("rounds csv", e))?;
    Ok(())
}

/// Semi-synthetic results: one row per (shift, seed, rule).
pub fn write_semi_synthetic_csv<W: Write>(out: W, result: &SemiSyntheticResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["shift", "seed", "rule", "test_loss", "test_acc"])?;
    for r in &result.rows {
        w.write_record([
            shift_label(&r.shift),
            r.seed.to_string(),
            r.rule.clone(),
            r.final_test_loss.to_string(),
            r.final_test_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| FdaError::io("semi-synthetic csv", e))?;
    Ok(())
}

fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports always serialize");
    bytes.push(b'\n');
    bytes
}

/// Trains a single run (`rounds.csv`, `summary.json`) or a semi-synthetic sweep
/// (`semi_synthetic.csv`, `summary.json`).
pub fn cmd_run(inv: &Invocation) -> Result<Outcome> {
    match &inv.config {
        ExperimentConfig::SingleRun(c) => {
            let task = c.task.build(c.seed, &inv.config_dir)?;
            let fed = c.federation();
            fed.validate(task.sources.len(), task.target_train.n())?;
            let reports = run_experiment(&fed, &task.sources, &task.target_train, &task.target_test)?;
            let last = tasks::final_report(&reports)?;
            let summary = RunSummary {
                rule: fed.rule.label(),
                rounds: reports.len(),
                n_sources: task.sources.len(),
                target_train_size: task.target_train.n(),
                final_test_loss: last.target_test_loss,
                final_test_accuracy: last.target_test_accuracy,
                best_test_loss: reports.iter().map(|r| r.target_test_loss).fold(f64::INFINITY, f64::min),
                final_betas: last.betas_used.clone(),
            };
            let mut csv_bytes = Vec::new();
            write_rounds_csv(&mut csv_bytes, &fed, task.sources.len(), &reports)?;
            inv.create_out_dir()?;
            let files = vec![
                inv.write("rounds.csv", &csv_bytes)?,
                inv.write("summary.json", &to_pretty_json(&summary))?,
                inv.write_config()?,
            ];
            let mut line = format!("{}: final test loss {}", summary.rule, summary.final_test_loss);
            if let Some(acc) = summary.final_test_accuracy {
                line.push_str(&format!(", accuracy {acc}"));
            }
            Ok(Outcome::new(files, vec![line]))
        }
        ExperimentConfig::SemiSynthetic(c) => {
            let result = run_semi_synthetic(&c.sweep)?;
            let mut csv_bytes = Vec::new();
            write_semi_synthetic_csv(&mut csv_bytes, &result)?;
            let mut summary = Vec::new();
            let mut table = Vec::new();
            for shift in &c.sweep.shifts {
                for rule in c.sweep.rules() {
                    let label = rule.label();
                    let acc = result.mean_accuracy(shift, &label);
                    if let Some(a) = acc {
                        summary.push(format!("{} {label}: mean accuracy {a}", shift_label(shift)));
                    }
                    table.push(serde_json::json!({
                        "shift": shift_label(shift),
                        "rule": label,
                        "mean_accuracy": acc,
                    }));
                }
            }
            inv.create_out_dir()?;
            let files = vec![
                inv.write("semi_synthetic.csv", &csv_bytes)?,
                inv.write("summary.json", &to_pretty_json(&table))?,
                inv.write_config()?,
            ];
            Ok(Outcome::new(files, summary))
        }
        other => Err(wrong_kind("run", other, "single_run or semi_synthetic")),
    }
}

/// Predicted-vs-actual winner grid (`grid.csv`, `grid_summary.json`).
pub fn cmd_grid(inv: &Invocation) -> Result<Outcome> {
    let ExperimentConfig::SyntheticGrid(c) = &inv.config else {
        return Err(wrong_kind("grid", &inv.config, "synthetic_grid"));
    };
    let result = predicted_vs_actual_grid(&c.grid)?;
    let mut csv_bytes = Vec::new();
    result.write_csv(&mut csv_bytes)?;
    let agreement = result.agreement_rate();
    let auto = result
        .auto_label
        .as_ref()
        .and_then(|_| result.auto_win_rate(&crate::aggregate::AggregationRule::fed_da(0.5).label()));
    let summary_json = serde_json::json!({
        "cells": result.cells.len(),
        "agreement_rate": agreement,
        "auto_rule": result.auto_label,
        "auto_beats_fed_da_high_shift": auto,
    });
    inv.create_out_dir()?;
    let files = vec![
        inv.write("grid.csv", &csv_bytes)?,
        inv.write("grid_summary.json", &to_pretty_json(&summary_json))?,
        inv.write_config()?,
    ];
    let mut line = format!("agreement_rate={agreement} cells={}", result.cells.len());
    if let Some(a) = auto {
        line.push_str(&format!(" auto_beats_fed_da_high_shift={a}"));
    }
    Ok(Outcome::new(files, vec![line]))
}

/// Monte-Carlo estimator check (`estimators.json`); fails the command when any
/// estimator's |z| exceeds the threshold.
pub fn cmd_validate_estimators(inv: &Invocation) -> Result<Outcome> {
    let ExperimentConfig::EstimatorValidation(c) = &inv.config else {
        return Err(wrong_kind("validate-estimators", &inv.config, "estimator_validation"));
    };
    let report = validate_estimators(&c.validation)?;
    inv.create_out_dir()?;
    let files = vec![
        inv.write("estimators.json", &to_pretty_json(&report))?,
        inv.write_config()?,
    ];
    let mut summary: Vec<String> = report
        .checks
        .iter()
        .map(|ch| {
            format!(
                "{} {}: mean {} truth {} z {:.3}",
                if ch.pass { "PASS" } else { "FAIL" },
                ch.name,
                ch.mean,
                ch.truth,
                ch.z
            )
        })
        .collect();
    if report.degenerate_source {
        summary.push("note: source gradient is degenerate; tau2d2 projects nothing out".into());
    }
    Ok(Outcome {
        files,
        summary,
        check_failed: !report.passed(),
    })
}

#[derive(Debug, Parser)]
#[command(name = "fda", version, about = "Federated domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the datasets an experiment uses.
    Generate(CommonArgs),
    /// Train a single_run or semi_synthetic experiment.
    Run(CommonArgs),
    /// Run a synthetic_grid experiment.
    Grid(CommonArgs),
    /// Run the estimator unbiasedness check.
    ValidateEstimators(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; overrides $FDA_OUT_DIR and the config's out_dir.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

/// Runs one command with an optional thread bound.
pub fn execute(command: &Command) -> Result<Outcome> {
    let (args, f): (&CommonArgs, fn(&Invocation) -> Result<Outcome>) = match command {
        Command::Generate(a) => (a, cmd_generate),
        Command::Run(a) => (a, cmd_run),
        Command::Grid(a) => (a, cmd_grid),
        Command::ValidateEstimators(a) => (a, cmd_validate_estimators),
    };
    let inv = Invocation::new(&args.config, args.out.clone(), args.seed)?;
    match args.threads {
        Some(0) => Err(FdaError::config("threads", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FdaError::config("threads", e.to_string()))?
            .install(|| f(&inv)),
        None => f(&inv),
    }
}

/// Parses arguments, runs the command, prints summaries, and returns the exit code:
/// 0 success, 2 configuration error, 3 numeric or runtime error, 4 failed check.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            if outcome.check_failed {
                EXIT_CHECK_FAILED
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"{
        "kind": "single_run",
        "seed": 3,
        "task": {
            "type": "synthetic",
            "base": {"input_dim": 4, "output_dim": 2, "n_samples": 80, "n_basis": 5, "n_mixture": 2, "seed": 1},
            "source_shifts": [0.2, 0.8],
            "target_size": 12,
            "test_size": 20
        },
        "federation": {
            "rounds": 3, "lr_s": 0.05, "batch_s": 20, "batch_t": 4, "hidden_dim": 4,
            "rule": {"kind": "fed_gp", "betas": "auto"}
        }
    }"#;

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig::from_json(SINGLE, Path::new("x.json")).unwrap();
        let again = ExperimentConfig::from_json(&c.to_json(), Path::new("x.json")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unknown_fields_and_kinds_are_config_errors() {
        let bad = SINGLE.replace("\"seed\": 3,", "\"seed\": 3, \"sed\": 1,");
        let e = ExperimentConfig::from_json(&bad, Path::new("x.json")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("sed"), "{e}");
        let bad = SINGLE.replace("single_run", "single");
        assert!(ExperimentConfig::from_json(&bad, Path::new("x.json")).is_err());
    }

    #[test]
    fn auto_columns_follow_the_rule() {
        let c = match ExperimentConfig::from_json(SINGLE, Path::new("x.json")).unwrap() {
            ExperimentConfig::SingleRun(c) => c,
            _ => unreachable!(),
        };
        let task = c.task.build(c.seed, Path::new(".")).unwrap();
        let header = |fed: &FederationConfig| {
            let reports = run_experiment(fed, &task.sources, &task.target_train, &task.target_test).unwrap();
            let mut out = Vec::new();
            write_rounds_csv(&mut out, fed, 2, &reports).unwrap();
            String::from_utf8(out).unwrap().lines().next().unwrap().to_string()
        };
        assert_eq!(
            header(&c.federation()),
            "round,rule,beta_1,beta_2,sigma2_hat,d2_hat_1,d2_hat_2,tau2d2_hat_1,tau2d2_hat_2,test_loss,test_acc"
        );
        let fixed = FederationConfig {
            rule: crate::aggregate::AggregationRule::fed_da(0.5),
            ..c.federation()
        };
        assert_eq!(header(&fixed), "round,rule,beta_1,beta_2,test_loss,test_acc");
        let target = FederationConfig {
            rule: crate::aggregate::AggregationRule::target_only(),
            ..c.federation()
        };
        assert_eq!(header(&target), "round,rule,test_loss,test_acc");
    }

    #[test]
    fn seed_override_reaches_every_kind() {
        let mut c = ExperimentConfig::from_json(SINGLE, Path::new("x.json")).unwrap();
        c.set_seed(11);
        assert!(matches!(c, ExperimentConfig::SingleRun(ref s) if s.seed == 11));
        let mut g = ExperimentConfig::SyntheticGrid(GridExperiment {
            grid: GridConfig::full(0),
            out_dir: None,
        });
        g.set_seed(5);
        assert!(matches!(g, ExperimentConfig::SyntheticGrid(ref s) if s.grid.seed == 5));
    }
}
