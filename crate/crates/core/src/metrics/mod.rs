//! Ground-truth oracles for the Delta error: exact source-target distance, exact
//! target variance, and Monte-Carlo estimates of `E‖g_{D_T} − ĝ_Aggr‖²_π`.
//!
//! Full datasets stand in for populations. Gradients at every atom of `π` are
//! computed once ([`GradientCache`]) so many rules and resamples can share them.

mod grid;

pub use grid::{predicted_vs_actual_grid, GridCell, GridConfig, GridResult, GridTraining};

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, AggregationRule};
use crate::error::{FdaError, Result};
use crate::linalg::{pi_norm_sq, ParamVector, PiMeasure};
use crate::model::{gradient, Dataset, Model};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaErrorResult {
    pub rule_name: String,
    pub delta2: f64,
    pub n_resamples: usize,
    pub std_error: f64,
}

/// How target subsamples are drawn from the finite target population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub resamples: usize,
    pub seed: u64,
    /// Draw i.i.d. rows; otherwise draw `n` distinct rows.
    #[serde(default = "with_replacement_default")]
    pub with_replacement: bool,
}

fn with_replacement_default() -> bool {
    true
}

impl MonteCarlo {
    pub fn new(resamples: usize, seed: u64) -> Self {
        MonteCarlo {
            resamples,
            seed,
            with_replacement: true,
        }
    }
}

/// `d_π(D_S, D_T) = ‖g_{D_T} − g_{D_S}‖_π`.
pub fn exact_distance(d_source: &Dataset, d_target: &Dataset, model_template: &Model, pi: &PiMeasure) -> Result<f64> {
    model_template.check_data(d_source)?;
    model_template.check_data(d_target)?;
    let sq = pi_norm_sq(
        |theta| {
            let m = model_template.with_params(theta.clone())?;
            gradient(&m, d_target)?.sub(&gradient(&m, d_source)?)
        },
        pi,
    )?;
    Ok(sq.sqrt())
}

/// `σ²_π(D̂_T) = σ²_π(z) / n` for a size-`n` i.i.d. sample of `d_target`.
pub fn exact_sigma2(d_target: &Dataset, n: usize, model_template: &Model, pi: &PiMeasure) -> Result<f64> {
    if n == 0 {
        return Err(FdaError::config("n", "sample size must be at least 1"));
    }
    let cache = GradientCache::new(&[], d_target, model_template, pi)?;
    Ok(cache.sigma2(n))
}

/// Monte-Carlo Delta error of one rule; see [`GradientCache::delta2_many`].
pub fn monte_carlo_delta2(
    rule: &AggregationRule,
    betas: &[f64],
    cache: &GradientCache,
    n: usize,
    mc: &MonteCarlo,
) -> Result<DeltaErrorResult> {
    let mut out = cache.delta2_many(&[(rule.clone(), betas.to_vec())], n, mc)?;
    Ok(out.remove(0))
}

struct Atom {
    /// Per-sample target gradients, row-major `n_T × m`.
    per_sample: Arc<Vec<f64>>,
    target: ParamVector,
    sources: Vec<ParamVector>,
    /// `(1/n_T) Σ_z ‖g_{D_T} − ∇ℓ(·, z)‖²` at this atom.
    sigma2_z: f64,
}

/// Population and per-sample gradients of a fixed source/target problem at every atom
/// of `π`.
pub struct GradientCache {
    layout: Vec<usize>,
    dim: usize,
    n_target: usize,
    source_sizes: Vec<usize>,
    atoms: Vec<Atom>,
}

impl GradientCache {
    pub fn new(sources: &[Dataset], target: &Dataset, model_template: &Model, pi: &PiMeasure) -> Result<Self> {
        for d in sources.iter().chain(std::iter::once(target)) {
            model_template.check_data(d)?;
        }
        if target.n() == 0 {
            return Err(FdaError::config("target", "target dataset is empty"));
        }
        let layout = model_template.params().layout();
        let dim = model_template.params().total_dim();
        let n_t = target.n();
        let atoms = pi
            .points()
            .iter()
            .map(|theta| {
                let m = model_template.with_params(theta.clone())?;
                let per_sample = m.per_sample_gradients(target)?;
                let target_grad = gradient(&m, target)?;
                let flat = target_grad.to_flat();
                let sigma2_z = per_sample
                    .chunks(dim)
                    .map(|row| row.iter().zip(&flat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .sum::<f64>()
                    / n_t as f64;
                let sources = sources.iter().map(|d| gradient(&m, d)).collect::<Result<_>>()?;
                Ok(Atom {
                    per_sample: Arc::new(per_sample),
                    target: target_grad,
                    sources,
                    sigma2_z,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GradientCache {
            layout,
            dim,
            n_target: n_t,
            source_sizes: sources.iter().map(Dataset::n).collect(),
            atoms,
        })
    }

    /// Cache built from explicit gradients: for each atom, the per-sample target
    /// gradients (whose mean is the population gradient) and one gradient per source.
    pub fn from_gradients(atoms: Vec<(Vec<ParamVector>, Vec<ParamVector>)>, source_sizes: Vec<usize>) -> Result<Self> {
        let first = atoms
            .first()
            .and_then(|(samples, _)| samples.first())
            .cloned()
            .ok_or_else(|| FdaError::config("atoms", "need at least one atom with samples"))?;
        let layout = first.layout();
        let dim = first.total_dim();
        let n_target = atoms[0].0.len();
        let mut built = Vec::with_capacity(atoms.len());
        for (samples, sources) in atoms {
            if samples.len() != n_target {
                return Err(FdaError::shape("every atom needs the same number of samples"));
            }
            if sources.len() != source_sizes.len() {
                return Err(FdaError::shape("one source gradient per source size expected"));
            }
            for g in samples.iter().chain(&sources) {
                first.check_conformable(g)?;
            }
            let target = ParamVector::mean(&samples)?;
            let sigma2_z = samples
                .iter()
                .map(|g| g.sub(&target).map(|d| d.norm_sq()))
                .sum::<Result<f64>>()?
                / n_target as f64;
            let per_sample: Vec<f64> = samples.iter().flat_map(|g| g.to_flat()).collect();
            built.push(Atom {
                per_sample: Arc::new(per_sample),
                target,
                sources,
                sigma2_z,
            });
        }
        Ok(GradientCache {
            layout,
            dim,
            n_target,
            source_sizes,
            atoms: built,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.source_sizes.len()
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    /// `σ²_π(z) / n`.
    pub fn sigma2(&self, n: usize) -> f64 {
        self.mean_over_atoms(|a| a.sigma2_z) / n as f64
    }

    /// `d²_π` between source `i` and the target population.
    pub fn distance_sq(&self, i: usize) -> Result<f64> {
        let mut total = 0.0;
        for a in &self.atoms {
            let s = a
                .sources
                .get(i)
                .ok_or_else(|| FdaError::config("source", format!("no source with index {i}")))?;
            total += a.target.sub(s)?.norm_sq();
        }
        Ok(total / self.atoms.len() as f64)
    }

    /// `τ̄²_π d²_π` for source `i`: squared π-norm of the part of the target gradient
    /// orthogonal to the source gradient.
    pub fn orthogonal_sq(&self, i: usize) -> Result<f64> {
        let mut total = 0.0;
        for a in &self.atoms {
            let s = &a.sources[i];
            let ss = s.norm_sq();
            let r = if ss > 0.0 {
                let c = crate::linalg::inner(&a.target, s)? / ss;
                a.target.sub(&s.scale(c))?
            } else {
                a.target.clone()
            };
            total += r.norm_sq();
        }
        Ok(total / self.atoms.len() as f64)
    }

    fn mean_over_atoms(&self, f: impl Fn(&Atom) -> f64) -> f64 {
        self.atoms.iter().map(f).sum::<f64>() / self.atoms.len() as f64
    }

    fn draw_rows(&self, n: usize, mc: &MonteCarlo, r: usize) -> Vec<usize> {
        let mut rng = rng::stream(mc.seed, "delta-resample", &[r as u64]);
        if mc.with_replacement {
            (0..n).map(|_| rng.random_range(0..self.n_target)).collect()
        } else {
            rand::seq::index::sample(&mut rng, self.n_target, n).into_vec()
        }
    }

    fn subsample_gradient(&self, atom: &Atom, rows: &[usize]) -> Result<ParamVector> {
        let mut acc = vec![0.0; self.dim];
        for &row in rows {
            let g = &atom.per_sample[row * self.dim..(row + 1) * self.dim];
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        ParamVector::from_flat_with_layout(&self.layout, &acc)
    }

    /// The same cache restricted to the listed sources, sharing target gradients.
    pub fn select_sources(&self, indices: &[usize]) -> Result<GradientCache> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_sources()) {
            return Err(FdaError::config("source", format!("no source with index {bad}")));
        }
        Ok(GradientCache {
            layout: self.layout.clone(),
            dim: self.dim,
            n_target: self.n_target,
            source_sizes: indices.iter().map(|&i| self.source_sizes[i]).collect(),
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    per_sample: Arc::clone(&a.per_sample),
                    target: a.target.clone(),
                    sources: indices.iter().map(|&i| a.sources[i].clone()).collect(),
                    sigma2_z: a.sigma2_z,
                })
                .collect(),
        })
    }

    /// Monte-Carlo Delta errors of several rules on common resamples: each resample
    /// draws a size-`n` target sample and scores `‖g_{D_T} − Aggr(g_S, ĝ_T, β)‖²_π`
    /// for every rule.
    pub fn delta2_many(
        &self,
        rules: &[(AggregationRule, Vec<f64>)],
        n: usize,
        mc: &MonteCarlo,
    ) -> Result<Vec<DeltaErrorResult>> {
        let all: Vec<usize> = (0..self.n_sources()).collect();
        Ok(self.delta2_grouped(rules, n, mc, &[all])?.remove(0))
    }

    /// Like [`delta2_many`](Self::delta2_many) but pairs the target with each source
    /// on its own; result is indexed `[source][rule]`. Every pairing sees the same
    /// resamples.
    pub fn delta2_each_source(
        &self,
        rules: &[(AggregationRule, Vec<f64>)],
        n: usize,
        mc: &MonteCarlo,
    ) -> Result<Vec<Vec<DeltaErrorResult>>> {
        let groups: Vec<Vec<usize>> = (0..self.n_sources()).map(|i| vec![i]).collect();
        self.delta2_grouped(rules, n, mc, &groups)
    }

    fn delta2_grouped(
        &self,
        rules: &[(AggregationRule, Vec<f64>)],
        n: usize,
        mc: &MonteCarlo,
        groups: &[Vec<usize>],
    ) -> Result<Vec<Vec<DeltaErrorResult>>> {
        if mc.resamples < 2 {
            return Err(FdaError::config("resamples", "need at least 2 resamples"));
        }
        if n == 0 {
            return Err(FdaError::config("n", "sample size must be at least 1"));
        }
        if !mc.with_replacement && n > self.n_target {
            return Err(FdaError::config(
                "n",
                format!(
                    "cannot draw {n} distinct rows from {} without replacement",
                    self.n_target
                ),
            ));
        }
        for group in groups {
            for (rule, betas) in rules {
                rule.validate(group.len())?;
                if rule.is_auto() {
                    return Err(FdaError::config(
                        "rule",
                        "Delta errors need explicit betas, not \"auto\"",
                    ));
                }
                if rule.uses_betas() && betas.len() != group.len() {
                    return Err(FdaError::config(
                        "betas",
                        format!("expected {} betas, got {}", group.len(), betas.len()),
                    ));
                }
            }
        }
        let sizes: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| g.iter().map(|&i| self.source_sizes[i]).collect())
            .collect();
        let atom_sources: Vec<Vec<Vec<ParamVector>>> = self
            .atoms
            .iter()
            .map(|a| {
                groups
                    .iter()
                    .map(|g| g.iter().map(|&i| a.sources[i].clone()).collect())
                    .collect()
            })
            .collect();

        // errors[resample][group][rule]
        let errors: Vec<Vec<Vec<f64>>> = (0..mc.resamples)
            .into_par_iter()
            .map(|r| {
                let rows = self.draw_rows(n, mc, r);
                let mut errs = vec![vec![0.0; rules.len()]; groups.len()];
                for (atom, sources) in self.atoms.iter().zip(&atom_sources) {
                    let g_hat = self.subsample_gradient(atom, &rows)?;
                    for ((group_sources, group_sizes), group_errs) in sources.iter().zip(&sizes).zip(errs.iter_mut()) {
                        for ((rule, betas), e) in rules.iter().zip(group_errs.iter_mut()) {
                            let agg = aggregate(rule, group_sources, group_sizes, &g_hat, betas)?;
                            *e += atom.target.sub(&agg)?.norm_sq();
                        }
                    }
                }
                let k = self.atoms.len() as f64;
                errs.iter_mut().flatten().for_each(|e| *e /= k);
                Ok(errs)
            })
            .collect::<Result<_>>()?;

        let r = mc.resamples as f64;
        Ok((0..groups.len())
            .map(|g| {
                rules
                    .iter()
                    .enumerate()
                    .map(|(k, (rule, betas))| {
                        let mean = errors.iter().map(|e| e[g][k]).sum::<f64>() / r;
                        let var = errors.iter().map(|e| (e[g][k] - mean).powi(2)).sum::<f64>() / (r - 1.0);
                        DeltaErrorResult {
                            rule_name: rule_label(rule, betas),
                            delta2: mean,
                            n_resamples: mc.resamples,
                            std_error: (var / r).sqrt(),
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

fn rule_label(rule: &AggregationRule, betas: &[f64]) -> String {
    match betas {
        [b, rest @ ..] if rule.uses_betas() && rest.iter().any(|x| x != b) => {
            let list: Vec<String> = betas.iter().map(|b| format!("{b}")).collect();
            format!("{}[{}]", rule.label(), list.join(","))
        }
        _ => rule.label(),
    }
}
