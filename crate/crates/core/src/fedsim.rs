//! In-process federated training: source clients, one target client, and a server
//! that aggregates model updates every round.
//!
//! One round, starting from the global model `h`:
//!
//! 1. every source client runs `local_epochs` of mini-batch SGD on its data and
//!    reports `g_{S_i} = h_{S_i} − h`;
//! 2. the target client runs `target_epochs` passes over its data, keeping each
//!    per-batch update `g^j`, and reports `g_T = h_T − h`;
//! 3. source updates are rescaled onto the target's step count and learning rate;
//! 4. in auto mode the per-source β are re-estimated from `{g^j}` and the aligned
//!    source updates;
//! 5. `h ← h + Aggr({g_{S_i}}, g_T, β)`.
//!
//! All randomness is keyed by `(seed, client, round, epoch)`, and source clients may
//! train in parallel without changing any result.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, align_source_update, AggregationRule, Alignment};
use crate::autoweight::{estimate_delta_stats, BatchGradients, DeltaStats};
use crate::error::{FdaError, Result};
use crate::linalg::ParamVector;
use crate::model::{evaluate, Arch, Dataset, Model};
use crate::rng;

/// Weight used for every source before (or without) auto-weighting.
pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    /// SGD passes over each source dataset per round.
    #[serde(default = "one")]
    pub local_epochs: usize,
    /// SGD passes over the target dataset per round.
    #[serde(default = "one")]
    pub target_epochs: usize,
    pub lr_s: f64,
    /// Defaults to `lr_s / 5`.
    #[serde(default)]
    pub lr_t: Option<f64>,
    pub batch_s: usize,
    pub batch_t: usize,
    pub rule: AggregationRule,
    /// Source-only warm-up rounds before the first reported round.
    #[serde(default)]
    pub init_epochs: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Rescale source updates onto the target's step count and learning rate.
    #[serde(default = "yes")]
    pub align_updates: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_hidden() -> usize {
    32
}

impl FederationConfig {
    pub fn new(rule: AggregationRule, rounds: usize, lr_s: f64, batch_s: usize, batch_t: usize) -> Self {
        FederationConfig {
            rounds,
            local_epochs: 1,
            target_epochs: 1,
            lr_s,
            lr_t: None,
            batch_s,
            batch_t,
            rule,
            init_epochs: 0,
            hidden_dim: 32,
            align_updates: true,
            seed: 0,
        }
    }

    pub fn lr_t(&self) -> f64 {
        self.lr_t.unwrap_or(self.lr_s / 5.0)
    }

    pub fn auto_weight(&self) -> bool {
        self.rule.is_auto()
    }

    /// Number of target batch updates per round.
    pub fn target_steps(&self, n_target: usize) -> usize {
        self.target_epochs * n_target.div_ceil(self.batch_t.max(1))
    }

    pub fn validate(&self, n_sources: usize, n_target: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(FdaError::config("rounds", "must be at least 1"));
        }
        if !(self.lr_s > 0.0 && self.lr_s.is_finite()) {
            return Err(FdaError::config("lr_s", "must be positive"));
        }
        if !(self.lr_t() > 0.0 && self.lr_t().is_finite()) {
            return Err(FdaError::config("lr_t", "must be positive"));
        }
        if self.batch_s == 0 {
            return Err(FdaError::config("batch_s", "must be positive"));
        }
        if self.batch_t == 0 {
            return Err(FdaError::config("batch_t", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(FdaError::config("hidden_dim", "must be positive"));
        }
        self.rule.validate(n_sources)?;
        if self.rule.uses_target() && n_target == 0 {
            return Err(FdaError::config("target_train", "target dataset is empty"));
        }
        if self.auto_weight() && self.target_steps(n_target) < 2 {
            return Err(FdaError::config(
                "batch_t",
                format!(
                    "auto-weighting needs at least 2 target batches per round, got {}",
                    self.target_steps(n_target)
                ),
            ));
        }
        Ok(())
    }
}

/// Server-side result of one round, before evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundStep {
    pub betas_used: Vec<f64>,
    pub delta_stats: Option<DeltaStats>,
    /// `h^{(r)} − h^{(r−1)}`.
    pub update: ParamVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub betas_used: Vec<f64>,
    pub delta_stats: Option<DeltaStats>,
    pub target_test_loss: f64,
    pub target_test_accuracy: Option<f64>,
    pub global_param_norm: f64,
    pub update_norm: f64,
}

/// Result of local training: the final model and the per-batch updates.
struct LocalRun {
    model: Model,
    steps: Vec<ParamVector>,
}

fn local_sgd(
    start: &Model,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    keep_steps: bool,
    shuffle_key: (u64, &str, u64, u64),
) -> Result<LocalRun> {
    let (seed, tag, client, round) = shuffle_key;
    let mut model = start.clone();
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..data.n()).collect();
    for epoch in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, tag, &[client, round, epoch as u64]));
        for rows in order.chunks(batch) {
            let g = model.gradient_rows(data, rows)?;
            model.params_mut().axpy(-lr, &g)?;
            if keep_steps {
                steps.push(g.scale(-lr));
            }
        }
    }
    if !model.params().is_finite() {
        return Err(FdaError::Numeric(format!("local training on '{}' diverged", data.name)));
    }
    Ok(LocalRun { model, steps })
}

/// Batch order used by the target client in `round` / `epoch`.
pub fn target_batch_order(seed: u64, n: usize, round: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "target-shuffle", &[0, round, epoch]));
    order
}

/// Stream index of a round; warm-up rounds live in a separate range.
fn round_key(round_index: usize, warmup: bool) -> u64 {
    if warmup {
        (1u64 << 63) | round_index as u64
    } else {
        round_index as u64
    }
}

fn round_step(
    global: &Model,
    sources: &[Dataset],
    target_train: &Dataset,
    cfg: &FederationConfig,
    rule: &AggregationRule,
    round: u64,
) -> Result<RoundStep> {
    let lr_t = cfg.lr_t();
    let source_runs: Vec<LocalRun> = sources
        .par_iter()
        .enumerate()
        .map(|(i, data)| {
            local_sgd(
                global,
                data,
                cfg.local_epochs,
                cfg.batch_s,
                cfg.lr_s,
                false,
                (cfg.seed, "source-shuffle", i as u64, round),
            )
        })
        .collect::<Result<_>>()?;

    let target_run = if rule.uses_target() {
        Some(local_sgd(
            global,
            target_train,
            cfg.target_epochs,
            cfg.batch_t,
            lr_t,
            rule.is_auto(),
            (cfg.seed, "target-shuffle", 0, round),
        )?)
    } else {
        None
    };

    let g_t = match &target_run {
        Some(run) => run.model.params().sub(global.params())?,
        None => global.params().zeros_like(),
    };
    let mut source_updates = Vec::with_capacity(sources.len());
    for (run, data) in source_runs.iter().zip(sources) {
        let raw = run.model.params().sub(global.params())?;
        let aligned = if cfg.align_updates && cfg.local_epochs > 0 && cfg.target_epochs > 0 {
            let alignment = Alignment {
                n_source: data.n(),
                n_target: target_train.n(),
                batch_s: cfg.batch_s,
                batch_t: cfg.batch_t,
                lr_s: cfg.lr_s,
                lr_t,
                local_rounds: cfg.local_epochs,
            };
            // the alignment targets one target pass; scale up for multi-pass targets
            align_source_update(&raw, &alignment)?.scale(cfg.target_epochs as f64)
        } else {
            raw
        };
        source_updates.push(aligned);
    }
    let sizes: Vec<usize> = sources.iter().map(Dataset::n).collect();

    let (betas, delta_stats) = match rule.fixed_betas(sources.len()) {
        Some(b) => (b, None),
        None => {
            let steps = &target_run.as_ref().expect("auto rules use the target").steps;
            let batch = BatchGradients::from_updates(steps.clone())?;
            let per_step = 1.0 / steps.len() as f64;
            let fields: Vec<Vec<ParamVector>> = source_updates.iter().map(|g| vec![g.scale(per_step)]).collect();
            let stats = estimate_delta_stats(&fields, &batch)?;
            let betas = match rule.kind {
                crate::aggregate::RuleKind::FedGp => stats.betas_gp(),
                _ => stats.betas_da(),
            };
            (betas, Some(stats))
        }
    };
    let update = aggregate(rule, &source_updates, &sizes, &g_t, &betas)?;
    Ok(RoundStep {
        betas_used: if rule.uses_betas() { betas } else { Vec::new() },
        delta_stats,
        update,
    })
}

/// One communication round. Returns the new global model and what the server did.
pub fn run_round(
    state: &Model,
    sources: &[Dataset],
    target_train: &Dataset,
    cfg: &FederationConfig,
    round_index: usize,
) -> Result<(Model, RoundStep)> {
    cfg.validate(sources.len(), target_train.n())?;
    for d in sources.iter().chain(std::iter::once(target_train)) {
        state.check_data(d)?;
    }
    let step = round_step(
        state,
        sources,
        target_train,
        cfg,
        &cfg.rule,
        round_key(round_index, false),
    )?;
    let mut next = state.clone();
    next.params_mut().axpy(1.0, &step.update)?;
    if !next.params().is_finite() {
        return Err(FdaError::Numeric("global model diverged".into()));
    }
    Ok((next, step))
}

/// Architecture implied by the target data.
pub fn arch_for(data: &Dataset) -> Arch {
    if data.is_classification() {
        Arch::MlpClassifier
    } else {
        Arch::MlpRegression
    }
}

/// Freshly initialized global model for `cfg.seed`.
pub fn initial_model(cfg: &FederationConfig, target: &Dataset) -> Result<Model> {
    Model::init(
        arch_for(target),
        target.input_dim(),
        cfg.hidden_dim,
        target.output_dim(),
        &mut rng::stream(cfg.seed, "init", &[]),
    )
}

/// Warm-up plus `cfg.rounds` rounds from a given starting model.
pub fn run_experiment_from(
    initial: &Model,
    cfg: &FederationConfig,
    sources: &[Dataset],
    target_train: &Dataset,
    target_test: &Dataset,
) -> Result<(Model, Vec<RoundReport>)> {
    cfg.validate(sources.len(), target_train.n())?;
    for d in sources.iter().chain([target_train, target_test]) {
        initial.check_data(d)?;
    }
    let mut global = initial.clone();
    if cfg.init_epochs > 0 {
        if sources.is_empty() {
            return Err(FdaError::config("init_epochs", "warm-up needs at least one source"));
        }
        let warmup = AggregationRule::source_only().with_weighting(cfg.rule.weighting);
        // plain source averaging: no rescaling onto the target during warm-up
        let warm_cfg = FederationConfig {
            align_updates: false,
            ..cfg.clone()
        };
        for r in 0..cfg.init_epochs {
            let step = round_step(&global, sources, target_train, &warm_cfg, &warmup, round_key(r, true))?;
            global.params_mut().axpy(1.0, &step.update)?;
        }
    }
    let mut reports = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let step = round_step(&global, sources, target_train, cfg, &cfg.rule, round_key(r, false))?;
        global.params_mut().axpy(1.0, &step.update)?;
        if !global.params().is_finite() {
            return Err(FdaError::Numeric(format!("global model diverged in round {r}")));
        }
        let metrics = evaluate(&global, target_test)?;
        reports.push(RoundReport {
            round: r + 1,
            betas_used: step.betas_used,
            delta_stats: step.delta_stats,
            target_test_loss: metrics.loss,
            target_test_accuracy: metrics.accuracy,
            global_param_norm: global.params().norm(),
            update_norm: step.update.norm(),
        });
    }
    Ok((global, reports))
}

/// Full training run from the seeded initialization; one report per round.
pub fn run_experiment(
    cfg: &FederationConfig,
    sources: &[Dataset],
    target_train: &Dataset,
    target_test: &Dataset,
) -> Result<Vec<RoundReport>> {
    let initial = initial_model(cfg, target_train)?;
    Ok(run_experiment_from(&initial, cfg, sources, target_train, target_test)?.1)
}
