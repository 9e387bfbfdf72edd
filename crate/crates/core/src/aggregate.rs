//! Server-side aggregation rules.
//!
//! All rules combine per-source gradients (or model updates) `g_{S_i}` with the
//! target gradient `g_T`:
//!
//! | rule         | per-source term                                  |
//! |--------------|--------------------------------------------------|
//! | source only  | `g_{S_i}`                                        |
//! | target only  | `g_T`                                            |
//! | FedDA        | `(1−β_i)·g_T + β_i·g_{S_i}`                      |
//! | FedGP        | `(1−β_i)·g_T + β_i·Proj₊(g_T │ g_{S_i})`         |
//!
//! and the terms are averaged with uniform or sample-size weights.

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::linalg::{inner, ParamVector};

/// Below this squared norm a source direction is treated as absent.
pub const DEGENERATE_NORM_SQ: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    SourceOnly,
    TargetOnly,
    FedDa,
    FedGp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionGranularity {
    WholeVector,
    #[default]
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceWeighting {
    Uniform,
    #[default]
    SampleSize,
}

/// How the per-source weights β are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaRepr", into = "BetaRepr")]
pub enum BetaMode {
    /// One β per source.
    Fixed(Vec<f64>),
    /// The same β for every source.
    Constant(f64),
    /// Re-estimated every round from the target's batch updates.
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    List(Vec<f64>),
    Scalar(f64),
    Word(String),
}

impl TryFrom<BetaRepr> for BetaMode {
    type Error = String;

    fn try_from(r: BetaRepr) -> std::result::Result<Self, String> {
        match r {
            BetaRepr::List(v) => Ok(BetaMode::Fixed(v)),
            BetaRepr::Scalar(b) => Ok(BetaMode::Constant(b)),
            BetaRepr::Word(w) if w == "auto" => Ok(BetaMode::Auto),
            BetaRepr::Word(w) => Err(format!("betas must be a number, a list or \"auto\", got \"{w}\"")),
        }
    }
}

impl From<BetaMode> for BetaRepr {
    fn from(m: BetaMode) -> Self {
        match m {
            BetaMode::Fixed(v) => BetaRepr::List(v),
            BetaMode::Constant(b) => BetaRepr::Scalar(b),
            BetaMode::Auto => BetaRepr::Word("auto".into()),
        }
    }
}

impl Default for BetaMode {
    fn default() -> Self {
        BetaMode::Constant(0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationRule {
    pub kind: RuleKind,
    #[serde(default)]
    pub betas: BetaMode,
    #[serde(default)]
    pub projection: ProjectionGranularity,
    #[serde(default)]
    pub weighting: SourceWeighting,
}

impl AggregationRule {
    pub fn new(kind: RuleKind, betas: BetaMode) -> Self {
        AggregationRule {
            kind,
            betas,
            projection: ProjectionGranularity::default(),
            weighting: SourceWeighting::default(),
        }
    }

    pub fn source_only() -> Self {
        Self::new(RuleKind::SourceOnly, BetaMode::Constant(1.0))
    }

    pub fn target_only() -> Self {
        Self::new(RuleKind::TargetOnly, BetaMode::Constant(0.0))
    }

    pub fn fed_da(beta: f64) -> Self {
        Self::new(RuleKind::FedDa, BetaMode::Constant(beta))
    }

    pub fn fed_gp(beta: f64) -> Self {
        Self::new(RuleKind::FedGp, BetaMode::Constant(beta))
    }

    pub fn fed_da_auto() -> Self {
        Self::new(RuleKind::FedDa, BetaMode::Auto)
    }

    pub fn fed_gp_auto() -> Self {
        Self::new(RuleKind::FedGp, BetaMode::Auto)
    }

    pub fn with_projection(mut self, projection: ProjectionGranularity) -> Self {
        self.projection = projection;
        self
    }

    pub fn with_weighting(mut self, weighting: SourceWeighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn is_auto(&self) -> bool {
        matches!(self.betas, BetaMode::Auto) && self.uses_betas()
    }

    pub fn uses_betas(&self) -> bool {
        matches!(self.kind, RuleKind::FedDa | RuleKind::FedGp)
    }

    pub fn uses_sources(&self) -> bool {
        self.kind != RuleKind::TargetOnly
    }

    pub fn uses_target(&self) -> bool {
        self.kind != RuleKind::SourceOnly
    }

    /// Short display label, e.g. `FedGP(0.5)` or `FedDA_Auto`.
    pub fn label(&self) -> String {
        let base = match self.kind {
            RuleKind::SourceOnly => return "SourceOnly".into(),
            RuleKind::TargetOnly => return "TargetOnly".into(),
            RuleKind::FedDa => "FedDA",
            RuleKind::FedGp => "FedGP",
        };
        match &self.betas {
            BetaMode::Auto => format!("{base}_Auto"),
            BetaMode::Constant(b) => format!("{base}({b})"),
            BetaMode::Fixed(v) => {
                let parts: Vec<String> = v.iter().map(|b| b.to_string()).collect();
                format!("{base}({})", parts.join(","))
            }
        }
    }

    /// Check the rule against a federation with `n_sources` sources.
    pub fn validate(&self, n_sources: usize) -> Result<()> {
        if self.uses_sources() && n_sources == 0 {
            return Err(FdaError::config(
                "rule",
                format!("{} needs at least one source", self.label()),
            ));
        }
        if !self.uses_betas() {
            return Ok(());
        }
        match &self.betas {
            BetaMode::Fixed(v) if v.len() != n_sources => Err(FdaError::config(
                "betas",
                format!("{} betas given for {n_sources} sources", v.len()),
            )),
            BetaMode::Fixed(v) => v.iter().try_for_each(|&b| check_beta(b)),
            BetaMode::Constant(b) => check_beta(*b),
            BetaMode::Auto => Ok(()),
        }
    }

    /// Fixed betas expanded to one per source; `None` in auto mode.
    pub fn fixed_betas(&self, n_sources: usize) -> Option<Vec<f64>> {
        match &self.betas {
            BetaMode::Fixed(v) => Some(v.clone()),
            BetaMode::Constant(b) => Some(vec![*b; n_sources]),
            BetaMode::Auto => None,
        }
    }
}

fn check_beta(b: f64) -> Result<()> {
    if (0.0..=1.0).contains(&b) {
        Ok(())
    } else {
        Err(FdaError::config("betas", format!("beta {b} outside [0, 1]")))
    }
}

/// `Proj₊(g_t │ g_s) = max{⟨g_t, g_s⟩, 0} · g_s / ‖g_s‖²`.
///
/// A (near-)zero source direction yields the zero vector.
pub fn proj_plus(g_t: &ParamVector, g_s: &ParamVector) -> Result<ParamVector> {
    let dot = inner(g_t, g_s)?;
    let ns = g_s.norm_sq();
    if ns < DEGENERATE_NORM_SQ || dot <= 0.0 {
        return Ok(g_s.zeros_like());
    }
    Ok(g_s.scale(dot / ns))
}

/// [`proj_plus`] applied independently to every layer; layers whose inner
/// product is non-positive are zeroed.
pub fn proj_plus_layerwise(g_t: &ParamVector, g_s: &ParamVector) -> Result<ParamVector> {
    g_t.check_conformable(g_s)?;
    let mut out = g_s.zeros_like();
    for (l, (t, s)) in g_t.layers().iter().zip(g_s.layers()).enumerate() {
        let mut dot = 0.0;
        let mut ns = 0.0;
        for (a, b) in t.iter().zip(s) {
            dot += a * b;
            ns += b * b;
        }
        if ns < DEGENERATE_NORM_SQ || dot <= 0.0 {
            continue;
        }
        let c = dot / ns;
        for (o, b) in out.layer_mut(l).iter_mut().zip(s) {
            *o = c * b;
        }
    }
    Ok(out)
}

fn project(g_t: &ParamVector, g_s: &ParamVector, granularity: ProjectionGranularity) -> Result<ParamVector> {
    match granularity {
        ProjectionGranularity::WholeVector => proj_plus(g_t, g_s),
        ProjectionGranularity::PerLayer => proj_plus_layerwise(g_t, g_s),
    }
}

/// Per-source averaging weights, summing to one.
pub fn source_weights(weighting: SourceWeighting, source_sizes: &[usize]) -> Result<Vec<f64>> {
    let n = source_sizes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    match weighting {
        SourceWeighting::Uniform => Ok(vec![1.0 / n as f64; n]),
        SourceWeighting::SampleSize => {
            let total: usize = source_sizes.iter().sum();
            if total == 0 {
                return Err(FdaError::config("source_sizes", "all source sizes are zero"));
            }
            Ok(source_sizes.iter().map(|&s| s as f64 / total as f64).collect())
        }
    }
}

/// Combine source and target gradients under `rule` with resolved per-source `betas`.
///
/// `betas` is ignored by source-only and target-only rules (it may be empty for them).
pub fn aggregate(
    rule: &AggregationRule,
    source_grads: &[ParamVector],
    source_sizes: &[usize],
    g_t: &ParamVector,
    betas: &[f64],
) -> Result<ParamVector> {
    if source_grads.len() != source_sizes.len() {
        return Err(FdaError::config(
            "source_sizes",
            format!("{} gradients but {} sizes", source_grads.len(), source_sizes.len()),
        ));
    }
    if rule.uses_sources() && source_grads.is_empty() {
        return Err(FdaError::config(
            "rule",
            format!("{} needs at least one source", rule.label()),
        ));
    }
    for g in source_grads {
        g_t.check_conformable(g)?;
    }
    if rule.uses_betas() {
        if betas.len() != source_grads.len() {
            return Err(FdaError::config(
                "betas",
                format!("{} betas for {} sources", betas.len(), source_grads.len()),
            ));
        }
        betas.iter().try_for_each(|&b| check_beta(b))?;
    }
    let weights = source_weights(rule.weighting, source_sizes)?;
    let mut out = g_t.zeros_like();
    match rule.kind {
        RuleKind::TargetOnly => out = g_t.clone(),
        RuleKind::SourceOnly => {
            for (g, w) in source_grads.iter().zip(&weights) {
                out.axpy(*w, g)?;
            }
        }
        RuleKind::FedDa => {
            for ((g, w), b) in source_grads.iter().zip(&weights).zip(betas) {
                out.axpy(w * (1.0 - b), g_t)?;
                out.axpy(w * b, g)?;
            }
        }
        RuleKind::FedGp => {
            for ((g, w), b) in source_grads.iter().zip(&weights).zip(betas) {
                let p = project(g_t, g, rule.projection)?;
                out.axpy(w * (1.0 - b), g_t)?;
                out.axpy(w * b, &p)?;
            }
        }
    }
    if !out.is_finite() {
        return Err(FdaError::Numeric("aggregated update is not finite".into()));
    }
    Ok(out)
}

/// Quantities needed to bring a source model update onto the target's scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub n_source: usize,
    pub n_target: usize,
    pub batch_s: usize,
    pub batch_t: usize,
    pub lr_s: f64,
    pub lr_t: f64,
    /// Local passes over the source data per round.
    pub local_rounds: usize,
}

impl Alignment {
    /// `((n_target/batch_t) / (n_source/batch_s)) · (lr_t/lr_s) · (1/local_rounds)`
    pub fn factor(&self) -> Result<f64> {
        for (field, v) in [
            ("n_source", self.n_source),
            ("n_target", self.n_target),
            ("batch_s", self.batch_s),
            ("batch_t", self.batch_t),
            ("local_rounds", self.local_rounds),
        ] {
            if v == 0 {
                return Err(FdaError::config(field, "must be positive for update alignment"));
            }
        }
        if !(self.lr_s > 0.0 && self.lr_t > 0.0) {
            return Err(FdaError::config("lr_s/lr_t", "must be positive for update alignment"));
        }
        let target_steps = self.n_target as f64 / self.batch_t as f64;
        let source_steps = self.n_source as f64 / self.batch_s as f64;
        Ok(target_steps / source_steps * (self.lr_t / self.lr_s) / self.local_rounds as f64)
    }
}

pub fn align_source_update(raw_update: &ParamVector, alignment: &Alignment) -> Result<ParamVector> {
    Ok(raw_update.scale(alignment.factor()?))
}
