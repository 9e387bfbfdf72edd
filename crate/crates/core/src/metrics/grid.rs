//! Predicted-vs-actual winner grid over source shift × target sample size.
//!
//! Every domain shares the target domain's inputs and differs only in its ground
//! truth. A held-out test split is carved from the target domain first; sources are
//! the remaining rows of each shifted domain, so a zero-shift source is exactly the
//! target population. Each cell pairs one source with one target subsample and
//! records which rule has the smallest Monte-Carlo Delta error at the initial
//! parameters (prediction) and which rule ends with the smallest test loss after
//! federated training (actual), both averaged over trials.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GradientCache, MonteCarlo};
use crate::aggregate::AggregationRule;
use crate::datagen::{gen_synthetic, SyntheticSpec};
use crate::error::{FdaError, Result};
use crate::fedsim::{arch_for, run_experiment_from, FederationConfig};
use crate::linalg::PiMeasure;
use crate::model::{Dataset, Model, Targets};
use crate::rng;

/// Training schedule shared by every grid cell. Batch sizes follow from the batch
/// counts so that small and large target samples take the same number of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTraining {
    pub rounds: usize,
    pub lr: f64,
    /// Target learning rate; defaults to `lr`.
    #[serde(default)]
    pub lr_t: Option<f64>,
    pub source_batches: usize,
    pub target_batches: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub init_epochs: usize,
}

fn default_hidden() -> usize {
    32
}

impl Default for GridTraining {
    fn default() -> Self {
        GridTraining {
            rounds: 20,
            lr: 0.05,
            lr_t: None,
            source_batches: 4,
            target_batches: 4,
            hidden_dim: 32,
            init_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Target domain; `shift_level` is ignored.
    pub base: SyntheticSpec,
    /// One source domain per level, in increasing shift order.
    pub shift_levels: Vec<f64>,
    /// Target subsample sizes, in decreasing order.
    pub target_sizes: Vec<usize>,
    pub test_size: usize,
    /// Contestants; ties go to the earlier rule.
    pub rules: Vec<AggregationRule>,
    /// Extra auto-weighted rule trained in every cell, outside the contest.
    #[serde(default)]
    pub auto_rule: Option<AggregationRule>,
    pub training: GridTraining,
    pub trials: usize,
    pub resamples: usize,
    /// Cells whose source index is at least this count as high-shift.
    pub high_shift_from: usize,
    /// Subtract the target pool's per-output mean from every domain's targets.
    #[serde(default)]
    pub center_targets: bool,
    #[serde(default)]
    pub seed: u64,
}

impl GridConfig {
    /// Nine shift levels × nine target sizes on 5000-sample, 50-dimensional domains,
    /// with targets centered on the target pool's mean.
    pub fn full(seed: u64) -> Self {
        GridConfig {
            base: SyntheticSpec::full_scale(seed),
            shift_levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0],
            target_sizes: vec![2000, 1000, 500, 200, 100, 50, 30, 20, 10],
            test_size: 1000,
            rules: vec![
                AggregationRule::source_only(),
                AggregationRule::target_only(),
                AggregationRule::fed_da(0.5),
                AggregationRule::fed_gp(0.5),
            ],
            auto_rule: Some(AggregationRule::fed_da_auto()),
            training: GridTraining::default(),
            trials: 3,
            resamples: 100,
            high_shift_from: 5,
            center_targets: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.rules.len() < 2 {
            return Err(FdaError::config("rules", "need at least 2 rules to pick a winner"));
        }
        if self.rules.iter().any(AggregationRule::is_auto) {
            return Err(FdaError::config(
                "rules",
                "contest rules need fixed betas; use auto_rule",
            ));
        }
        if self.shift_levels.is_empty() {
            return Err(FdaError::config("shift_levels", "must not be empty"));
        }
        if let Some(bad) = self.shift_levels.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(FdaError::config("shift_levels", format!("invalid level {bad}")));
        }
        if self.target_sizes.is_empty() || self.target_sizes.contains(&0) {
            return Err(FdaError::config("target_sizes", "must be non-empty and positive"));
        }
        if self.test_size == 0 || self.test_size >= self.base.n_samples {
            return Err(FdaError::config("test_size", "must leave some training rows"));
        }
        let pool = self.base.n_samples - self.test_size;
        if let Some(n) = self.target_sizes.iter().find(|&&n| n > pool) {
            return Err(FdaError::config(
                "target_sizes",
                format!("size {n} exceeds the {pool} non-test rows"),
            ));
        }
        if self.trials == 0 {
            return Err(FdaError::config("trials", "must be at least 1"));
        }
        if self.resamples < 2 {
            return Err(FdaError::config("resamples", "need at least 2 resamples"));
        }
        let t = &self.training;
        if t.source_batches == 0 || t.target_batches == 0 {
            return Err(FdaError::config("training", "batch counts must be positive"));
        }
        if let Some(auto) = &self.auto_rule {
            if !auto.is_auto() {
                return Err(FdaError::config("auto_rule", "must use auto betas"));
            }
            if self.target_sizes.iter().any(|&n| n < 2) || t.target_batches < 2 {
                return Err(FdaError::config(
                    "auto_rule",
                    "auto-weighting needs at least 2 target batches",
                ));
            }
        }
        Ok(())
    }

    fn federation(&self, rule: AggregationRule, n_source: usize, n_target: usize, seed: u64) -> FederationConfig {
        let t = &self.training;
        FederationConfig {
            lr_t: Some(t.lr_t.unwrap_or(t.lr)),
            init_epochs: t.init_epochs,
            hidden_dim: t.hidden_dim,
            seed,
            ..FederationConfig::new(
                rule,
                t.rounds,
                t.lr,
                n_source.div_ceil(t.source_batches),
                n_target.div_ceil(t.target_batches).max(1),
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub source_idx: usize,
    pub target_idx: usize,
    pub shift_level: f64,
    pub target_size: usize,
    /// `d_π` between source and target population, root-mean over trials.
    pub d_pi: f64,
    /// `σ_π` of a target sample of this size, root-mean over trials.
    pub sigma_pi: f64,
    /// Mean Monte-Carlo Delta error per contest rule.
    pub delta2: Vec<f64>,
    /// Mean final test loss per contest rule.
    pub test_loss: Vec<f64>,
    pub auto_test_loss: Option<f64>,
    pub predicted_winner: usize,
    pub actual_winner: usize,
    /// The winning value was shared with an earlier rule.
    pub predicted_tie: bool,
    pub actual_tie: bool,
}

impl GridCell {
    pub fn agree(&self) -> bool {
        self.predicted_winner == self.actual_winner
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rule_labels: Vec<String>,
    pub auto_label: Option<String>,
    pub high_shift_from: usize,
    /// Row-major over `(source_idx, target_idx)`.
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn agreement_rate(&self) -> f64 {
        self.cells.iter().filter(|c| c.agree()).count() as f64 / self.cells.len() as f64
    }

    pub fn high_shift_cells(&self) -> impl Iterator<Item = &GridCell> {
        self.cells.iter().filter(move |c| c.source_idx >= self.high_shift_from)
    }

    /// Fraction of high-shift cells where the auto rule's test loss is at most the
    /// named contest rule's. `None` without an auto rule, an unknown label, or no
    /// high-shift cells.
    pub fn auto_win_rate(&self, against: &str) -> Option<f64> {
        let k = self.rule_labels.iter().position(|l| l == against)?;
        let cells: Vec<&GridCell> = self.high_shift_cells().collect();
        if cells.is_empty() {
            return None;
        }
        let mut wins = 0;
        for c in &cells {
            if c.auto_test_loss? <= c.test_loss[k] {
                wins += 1;
            }
        }
        Some(wins as f64 / cells.len() as f64)
    }

    /// CSV with one row per cell. The first seven columns are fixed; per-rule Delta
    /// errors and test losses follow, named after the rule labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "source_idx",
            "target_idx",
            "d_pi",
            "sigma_pi",
            "predicted_winner",
            "actual_winner",
            "agree",
            "shift_level",
            "target_size",
            "predicted_tie",
            "actual_tie",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.rule_labels.iter().map(|l| format!("delta2_{l}")));
        header.extend(self.rule_labels.iter().map(|l| format!("test_loss_{l}")));
        if let Some(a) = &self.auto_label {
            header.push(format!("test_loss_{a}"));
        }
        w.write_record(&header)?;
        for c in &self.cells {
            let mut row = vec![
                c.source_idx.to_string(),
                c.target_idx.to_string(),
                c.d_pi.to_string(),
                c.sigma_pi.to_string(),
                self.rule_labels[c.predicted_winner].clone(),
                self.rule_labels[c.actual_winner].clone(),
                u8::from(c.agree()).to_string(),
                c.shift_level.to_string(),
                c.target_size.to_string(),
                u8::from(c.predicted_tie).to_string(),
                u8::from(c.actual_tie).to_string(),
            ];
            row.extend(c.delta2.iter().map(f64::to_string));
            row.extend(c.test_loss.iter().map(f64::to_string));
            if self.auto_label.is_some() {
                row.push(c.auto_test_loss.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| FdaError::io("grid csv", e))?;
        Ok(())
    }
}

/// Index of the smallest value, first one on ties, and whether a tie occurred.
fn argmin_first(values: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    let tie = values.iter().enumerate().any(|(i, v)| i != best && *v == values[best]);
    (best, tie)
}

fn regression_targets(data: &Dataset) -> Result<&[f64]> {
    match data.targets() {
        Targets::Regression(y) => Ok(y),
        Targets::Classification(_) => Err(FdaError::config("center_targets", "needs regression targets")),
    }
}

fn target_means(data: &Dataset) -> Result<Vec<f64>> {
    let k = data.output_dim();
    let mut means = vec![0.0; k];
    for row in regression_targets(data)?.chunks(k) {
        for (m, y) in means.iter_mut().zip(row) {
            *m += y;
        }
    }
    means.iter_mut().for_each(|m| *m /= data.n() as f64);
    Ok(means)
}

fn shift_targets(data: &Dataset, offset: &[f64]) -> Result<Dataset> {
    let y: Vec<f64> = regression_targets(data)?
        .chunks(offset.len())
        .flat_map(|row| row.iter().zip(offset).map(|(y, o)| y - o))
        .collect();
    Dataset::new(
        data.name.clone(),
        data.input_dim(),
        data.output_dim(),
        data.inputs().to_vec(),
        Targets::Regression(y),
    )
}

/// Per-trial data shared by every cell.
struct Trial {
    initial: Model,
    cache: GradientCache,
    /// `[target_idx][source_idx][rule]` Monte-Carlo Delta errors.
    delta2: Vec<Vec<Vec<f64>>>,
    /// Target subsample per size.
    targets: Vec<Dataset>,
}

/// Runs the full grid; cells are independent and may run in parallel without
/// changing the output.
pub fn predicted_vs_actual_grid(cfg: &GridConfig) -> Result<GridResult> {
    cfg.validate()?;
    let base = cfg.base.with_shift(0.0);
    let target_domain = gen_synthetic(&base)?;
    let mut rows: Vec<usize> = (0..target_domain.n()).collect();
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng::stream(cfg.seed, "grid-split", &[]));
    let (test_rows, pool_rows) = rows.split_at(cfg.test_size);
    let mut test = target_domain.select(test_rows)?;
    let mut pool = target_domain.select(pool_rows)?;
    let mut sources: Vec<Dataset> = cfg
        .shift_levels
        .iter()
        .map(|&s| gen_synthetic(&base.with_shift(s))?.select(pool_rows))
        .collect::<Result<_>>()?;
    if cfg.center_targets {
        let offset = target_means(&pool)?;
        for d in sources.iter_mut().chain([&mut test, &mut pool]) {
            *d = shift_targets(d, &offset)?;
        }
    }

    let rule_pairs: Vec<(AggregationRule, Vec<f64>)> = cfg
        .rules
        .iter()
        .map(|r| (r.clone(), r.fixed_betas(1).unwrap_or_default()))
        .collect();

    let trials: Vec<Trial> = (0..cfg.trials)
        .map(|t| {
            let initial = Model::init(
                arch_for(&pool),
                pool.input_dim(),
                cfg.training.hidden_dim,
                pool.output_dim(),
                &mut rng::stream(cfg.seed, "grid-init", &[t as u64]),
            )?;
            let pi = PiMeasure::point_mass(initial.params().clone());
            let cache = GradientCache::new(&sources, &pool, &initial, &pi)?;
            let delta2 = cfg
                .target_sizes
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    let mc = MonteCarlo::new(
                        cfg.resamples,
                        rng::stream_key(cfg.seed, "grid-delta", &[t as u64, j as u64]),
                    );
                    let per_source = cache.delta2_each_source(&rule_pairs, n, &mc)?;
                    Ok(per_source
                        .into_iter()
                        .map(|rules| rules.into_iter().map(|r| r.delta2).collect())
                        .collect())
                })
                .collect::<Result<_>>()?;
            let targets = cfg
                .target_sizes
                .iter()
                .enumerate()
                .map(|(j, &n)| {
                    crate::datagen::subsample(
                        &pool,
                        n,
                        rng::stream_key(cfg.seed, "grid-target", &[t as u64, j as u64]),
                    )
                    .map(|d| d.renamed(format!("target-{n}")))
                })
                .collect::<Result<_>>()?;
            Ok(Trial {
                initial,
                cache,
                delta2,
                targets,
            })
        })
        .collect::<Result<_>>()?;

    let n_s = cfg.shift_levels.len();
    let n_t = cfg.target_sizes.len();
    let cells: Vec<GridCell> = (0..n_s * n_t)
        .into_par_iter()
        .map(|k| grid_cell(cfg, &trials, &sources, &test, k / n_t, k % n_t))
        .collect::<Result<_>>()?;

    Ok(GridResult {
        rule_labels: cfg.rules.iter().map(AggregationRule::label).collect(),
        auto_label: cfg.auto_rule.as_ref().map(AggregationRule::label),
        high_shift_from: cfg.high_shift_from,
        cells,
    })
}

fn grid_cell(
    cfg: &GridConfig,
    trials: &[Trial],
    sources: &[Dataset],
    test: &Dataset,
    i: usize,
    j: usize,
) -> Result<GridCell> {
    let n_rules = cfg.rules.len();
    let n = cfg.target_sizes[j];
    let mut delta2 = vec![0.0; n_rules];
    let mut test_loss = vec![0.0; n_rules];
    let mut auto_loss = 0.0;
    let mut d2 = 0.0;
    let mut s2 = 0.0;
    let source = std::slice::from_ref(&sources[i]);
    for (t, trial) in trials.iter().enumerate() {
        d2 += trial.cache.distance_sq(i)?;
        s2 += trial.cache.sigma2(n);
        for (acc, v) in delta2.iter_mut().zip(&trial.delta2[j][i]) {
            *acc += v;
        }
        let target = &trial.targets[j];
        let seed = rng::stream_key(cfg.seed, "grid-train", &[t as u64, i as u64, j as u64]);
        let train = |rule: &AggregationRule| -> Result<f64> {
            let fed = cfg.federation(rule.clone(), sources[i].n(), target.n(), seed);
            let (_, reports) = run_experiment_from(&trial.initial, &fed, source, target, test)?;
            Ok(reports.last().map(|r| r.target_test_loss).unwrap_or(f64::NAN))
        };
        for (acc, rule) in test_loss.iter_mut().zip(&cfg.rules) {
            *acc += train(rule)?;
        }
        if let Some(auto) = &cfg.auto_rule {
            auto_loss += train(auto)?;
        }
    }
    let k = trials.len() as f64;
    delta2.iter_mut().chain(test_loss.iter_mut()).for_each(|v| *v /= k);
    let (predicted_winner, predicted_tie) = argmin_first(&delta2);
    let (actual_winner, actual_tie) = argmin_first(&test_loss);
    Ok(GridCell {
        source_idx: i,
        target_idx: j,
        shift_level: cfg.shift_levels[i],
        target_size: n,
        d_pi: (d2 / k).sqrt(),
        sigma_pi: (s2 / k).sqrt(),
        delta2,
        test_loss,
        auto_test_loss: cfg.auto_rule.as_ref().map(|_| auto_loss / k),
        predicted_winner,
        actual_winner,
        predicted_tie,
        actual_tie,
    })
}
