//! Unbiased estimators of the target variance σ², the source-target distance d²
//! and the projected distance τ²d², and the closed-form weights built from them.
//!
//! A target dataset split into `B` equal batches gives `B` i.i.d. batch gradients
//! `g^j` whose mean is the full-data gradient. With `ḡ` their mean:
//!
//! ```text
//! σ̂²     = 1/((B−1)B) · Σ_j ‖g^j − ḡ‖²_π
//! d̂²     = 1/B · Σ_j ‖g_S − g^j‖²_π  −  1/(B−1) · Σ_j ‖g^j − ḡ‖²_π
//! τ̂²d̂²  = 1/B · Σ_j ‖r^j‖²_π  −  1/(B−1) · Σ_j ‖r^j − r̄‖²_π,   r^j = g^j − ⟨g^j, u_S⟩u_S
//! ```
//!
//! where `u_S = g_S/‖g_S‖`. Every gradient is a function sampled on the atoms of a
//! measure π: a [`Field`] holds one vector per atom and `‖·‖²_π` averages over atoms.
//! During training each batch update is paired with its own parameter point, which
//! makes every field single-atom (see [`BatchGradients::from_updates`]).

use serde::{Deserialize, Serialize};

use crate::aggregate::DEGENERATE_NORM_SQ;
use crate::error::{FdaError, Result};
use crate::linalg::{field_norm_sq, inner, ParamVector};

/// A gradient function evaluated at every atom of a measure.
pub type Field = Vec<ParamVector>;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    fields: Vec<Field>,
}

impl BatchGradients {
    /// `fields[j][a]` is batch `j`'s gradient at atom `a`.
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        if fields.len() < 2 {
            return Err(FdaError::Estimation(format!(
                "need at least 2 batch gradients, got {}",
                fields.len()
            )));
        }
        let atoms = fields[0].len();
        if atoms == 0 {
            return Err(FdaError::Estimation("batch gradients have no atoms".into()));
        }
        let reference = &fields[0][0];
        for f in &fields {
            if f.len() != atoms {
                return Err(FdaError::shape("batch gradients disagree on atom count"));
            }
            for g in f {
                reference.check_conformable(g)?;
            }
        }
        Ok(BatchGradients { fields })
    }

    /// One update per batch, each measured at its own parameter point.
    pub fn from_updates(updates: Vec<ParamVector>) -> Result<Self> {
        Self::new(updates.into_iter().map(|g| vec![g]).collect())
    }

    pub fn batches(&self) -> usize {
        self.fields.len()
    }

    pub fn atoms(&self) -> usize {
        self.fields[0].len()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn mean_field(&self) -> Field {
        (0..self.atoms())
            .map(|a| {
                let at: Vec<ParamVector> = self.fields.iter().map(|f| f[a].clone()).collect();
                ParamVector::mean(&at).expect("non-empty, conformable")
            })
            .collect()
    }

    fn check_source(&self, g_s: &[ParamVector]) -> Result<()> {
        if g_s.len() != self.atoms() {
            return Err(FdaError::shape(format!(
                "source field has {} atoms, batch gradients have {}",
                g_s.len(),
                self.atoms()
            )));
        }
        self.fields[0][0].check_conformable(&g_s[0])?;
        Ok(())
    }
}

fn field_diff_norm_sq(a: &[ParamVector], b: &[ParamVector]) -> Result<f64> {
    let diffs = a.iter().zip(b).map(|(x, y)| x.sub(y)).collect::<Result<Vec<_>>>()?;
    field_norm_sq(&diffs)
}

/// `1/(B−1) Σ_j ‖f^j − f̄‖²_π` over arbitrary fields.
fn sample_variance_of(fields: &[Field]) -> Result<f64> {
    let b = fields.len();
    let atoms = fields[0].len();
    let mean: Field = (0..atoms)
        .map(|a| {
            let at: Vec<ParamVector> = fields.iter().map(|f| f[a].clone()).collect();
            ParamVector::mean(&at)
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for f in fields {
        total += field_diff_norm_sq(f, &mean)?;
    }
    Ok(total / (b - 1) as f64)
}

/// Unbiased sample variance of a single batch gradient, `σ̂²(D̂_{T,B})`.
pub fn batch_sample_variance(batch: &BatchGradients) -> Result<f64> {
    sample_variance_of(&batch.fields)
}

/// `σ̂²_π(D̂_T)`: variance of the full-data gradient, i.e. the batch variance over `B`.
pub fn estimate_sigma2(batch: &BatchGradients) -> Result<f64> {
    Ok(batch_sample_variance(batch)? / batch.batches() as f64)
}

/// `d̂²_π(D_S, D_T)`; unbiased, so it can come out negative.
pub fn estimate_d2(g_s: &[ParamVector], batch: &BatchGradients) -> Result<f64> {
    batch.check_source(g_s)?;
    let mut total = 0.0;
    for f in batch.fields() {
        total += field_diff_norm_sq(g_s, f)?;
    }
    Ok(total / batch.batches() as f64 - batch_sample_variance(batch)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub value: f64,
    /// Atoms where `g_S` vanished; no projection was removed there.
    pub degenerate_atoms: usize,
}

/// Estimate of `‖g_T − ⟨g_T, u_S⟩u_S‖²_π`, the τ̄²·d² term.
pub fn estimate_tau2d2(g_s: &[ParamVector], batch: &BatchGradients) -> Result<TauEstimate> {
    batch.check_source(g_s)?;
    let mut degenerate_atoms = 0;
    let units: Vec<Option<ParamVector>> = g_s
        .iter()
        .map(|g| {
            let ns = g.norm_sq();
            if ns < DEGENERATE_NORM_SQ {
                degenerate_atoms += 1;
                None
            } else {
                Some(g.scale(1.0 / ns.sqrt()))
            }
        })
        .collect();
    let residuals: Vec<Field> = batch
        .fields()
        .iter()
        .map(|f| {
            f.iter()
                .zip(&units)
                .map(|(g, u)| match u {
                    Some(u) => {
                        let mut r = g.clone();
                        r.axpy(-inner(g, u)?, u)?;
                        Ok(r)
                    }
                    None => Ok(g.clone()),
                })
                .collect::<Result<Field>>()
        })
        .collect::<Result<_>>()?;
    let mut second_moment = 0.0;
    for r in &residuals {
        second_moment += field_norm_sq(r)?;
    }
    second_moment /= residuals.len() as f64;
    Ok(TauEstimate {
        value: second_moment - sample_variance_of(&residuals)?,
        degenerate_atoms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    /// Raw (unclamped) estimate of d².
    pub d2_hat: f64,
    /// Raw (unclamped) estimate of τ²d².
    pub tau2d2_hat: f64,
    pub beta_da: f64,
    pub beta_gp: f64,
    pub d2_clamped: bool,
    pub tau2d2_clamped: bool,
    #[serde(default)]
    pub degenerate_atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub sigma2_hat: f64,
    pub sigma2_clamped: bool,
    pub sources: Vec<SourceStats>,
}

impl DeltaStats {
    pub fn betas_da(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.beta_da).collect()
    }

    pub fn betas_gp(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.beta_gp).collect()
    }
}

/// `σ²/(x + σ²)` with both inputs clamped at zero; a zero denominator gives 0.
fn optimal_beta(sigma2: f64, distance2: f64) -> f64 {
    let denom = distance2 + sigma2;
    if denom > 0.0 {
        (sigma2 / denom).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Minimizers of `(1−β)²σ² + β²d²` (FedDA) and `(1−β)²σ² + β²τ²d²` (FedGP).
pub fn compute_betas(sigma2: f64, d2_list: &[f64], tau2d2_list: &[f64]) -> Result<DeltaStats> {
    if d2_list.len() != tau2d2_list.len() {
        return Err(FdaError::shape(format!(
            "{} distance estimates but {} projected-distance estimates",
            d2_list.len(),
            tau2d2_list.len()
        )));
    }
    let s2 = sigma2.max(0.0);
    let sources = d2_list
        .iter()
        .zip(tau2d2_list)
        .map(|(&d2, &t2)| SourceStats {
            d2_hat: d2,
            tau2d2_hat: t2,
            beta_da: optimal_beta(s2, d2.max(0.0)),
            beta_gp: optimal_beta(s2, t2.max(0.0)),
            d2_clamped: d2 < 0.0,
            tau2d2_clamped: t2 < 0.0,
            degenerate_atoms: 0,
        })
        .collect();
    Ok(DeltaStats {
        sigma2_hat: sigma2,
        sigma2_clamped: sigma2 < 0.0,
        sources,
    })
}

/// Run all three estimators against every source field and derive the weights.
pub fn estimate_delta_stats(source_fields: &[Field], batch: &BatchGradients) -> Result<DeltaStats> {
    let sigma2 = estimate_sigma2(batch)?;
    let mut d2 = Vec::with_capacity(source_fields.len());
    let mut tau = Vec::with_capacity(source_fields.len());
    for g_s in source_fields {
        d2.push(estimate_d2(g_s, batch)?);
        tau.push(estimate_tau2d2(g_s, batch)?);
    }
    let t2: Vec<f64> = tau.iter().map(|t| t.value).collect();
    let mut stats = compute_betas(sigma2, &d2, &t2)?;
    for (s, t) in stats.sources.iter_mut().zip(&tau) {
        s.degenerate_atoms = t.degenerate_atoms;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_flat(v.to_vec()).unwrap()
    }

    #[test]
    fn needs_two_batches() {
        assert!(matches!(
            BatchGradients::from_updates(vec![pv(&[1.0])]),
            Err(FdaError::Estimation(_))
        ));
    }

    #[test]
    fn sigma2_examples() {
        let same = BatchGradients::from_updates(vec![pv(&[1.0, 2.0]); 4]).unwrap();
        assert_eq!(estimate_sigma2(&same).unwrap(), 0.0);
        let two = BatchGradients::from_updates(vec![pv(&[0.0, 0.0]), pv(&[2.0, 0.0])]).unwrap();
        assert_eq!(batch_sample_variance(&two).unwrap(), 2.0);
        assert_eq!(estimate_sigma2(&two).unwrap(), 1.0);
    }

    #[test]
    fn d2_examples() {
        let g = pv(&[1.0, -1.0, 2.0]);
        let batch = BatchGradients::from_updates(vec![g.clone(); 3]).unwrap();
        assert_eq!(estimate_d2(std::slice::from_ref(&g), &batch).unwrap(), 0.0);
        let u = pv(&[0.5, 0.0, -2.0]);
        let shifted = g.add(&u).unwrap();
        assert!((estimate_d2(&[shifted], &batch).unwrap() - u.norm_sq()).abs() < 1e-14);
    }

    #[test]
    fn tau2d2_examples() {
        let s = pv(&[1.0, 2.0, 0.0]);
        let colinear = BatchGradients::from_updates(vec![s.scale(0.5), s.scale(2.0), s.scale(3.0)]).unwrap();
        assert!(
            estimate_tau2d2(std::slice::from_ref(&s), &colinear)
                .unwrap()
                .value
                .abs()
                < 1e-14
        );
        let g = pv(&[2.0, -1.0, 4.0]);
        let orth = BatchGradients::from_updates(vec![g.clone(); 3]).unwrap();
        assert!((estimate_tau2d2(&[s], &orth).unwrap().value - g.norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_source_is_flagged() {
        let batch = BatchGradients::from_updates(vec![pv(&[1.0, 0.0]), pv(&[3.0, 0.0])]).unwrap();
        let t = estimate_tau2d2(&[pv(&[0.0, 0.0])], &batch).unwrap();
        assert_eq!(t.degenerate_atoms, 1);
        // nothing projected away: ‖ḡ‖² − s²/B = 4 − 2/2
        assert!((t.value - 3.0).abs() < 1e-14);
    }

    #[test]
    fn betas_examples() {
        let s = compute_betas(0.0, &[1.0], &[0.5]).unwrap();
        assert_eq!((s.sources[0].beta_da, s.sources[0].beta_gp), (0.0, 0.0));
        let s = compute_betas(2.0, &[0.0], &[0.0]).unwrap();
        assert_eq!((s.sources[0].beta_da, s.sources[0].beta_gp), (1.0, 1.0));
        let s = compute_betas(3.0, &[3.0], &[3.0]).unwrap();
        assert_eq!((s.sources[0].beta_da, s.sources[0].beta_gp), (0.5, 0.5));
        let s = compute_betas(0.0, &[0.0], &[0.0]).unwrap();
        assert_eq!(s.sources[0].beta_da, 0.0);
        assert!(compute_betas(1.0, &[1.0], &[]).is_err());
    }

    #[test]
    fn negative_estimates_are_clamped() {
        let s = compute_betas(1.0, &[-0.3], &[-0.1]).unwrap();
        assert!(s.sources[0].d2_clamped && s.sources[0].tau2d2_clamped);
        assert_eq!(s.sources[0].beta_da, 1.0);
        assert_eq!(s.sources[0].d2_hat, -0.3);
        let s = compute_betas(-1.0, &[1.0], &[1.0]).unwrap();
        assert!(s.sigma2_clamped);
        assert_eq!(s.sources[0].beta_gp, 0.0);
    }

    #[test]
    fn shared_measure_mode_averages_over_atoms() {
        // two atoms; batch j takes values (j, 0) at atom 0 and (0, 2j) at atom 1
        let fields: Vec<Field> = (0..3)
            .map(|j| vec![pv(&[j as f64, 0.0]), pv(&[0.0, 2.0 * j as f64])])
            .collect();
        let batch = BatchGradients::new(fields).unwrap();
        // sample variances per atom: 1 and 4 → mean 2.5, over B = 3
        assert!((estimate_sigma2(&batch).unwrap() - 2.5 / 3.0).abs() < 1e-14);
        assert!(estimate_d2(&[pv(&[0.0, 0.0])], &batch).is_err());
    }

    /// Monte-Carlo means of the estimators in a Gaussian gradient model.
    fn monte_carlo(trials: usize, seed: u64) -> [(f64, f64); 3] {
        let m = 4;
        let b = 8;
        let v = [1.0, -0.5, 0.25, 2.0];
        let u = [0.3, 0.4, -0.2, 0.1];
        let g_s = pv(&v.iter().zip(&u).map(|(a, c)| a + c).collect::<Vec<_>>());
        let mut r = rng::stream(seed, "autoweight-mc", &[]);
        let mut acc = [(0.0, 0.0); 3];
        for _ in 0..trials {
            let updates = (0..b)
                .map(|_| {
                    let g: Vec<f64> = (0..m)
                        .map(|k| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            v[k] + z
                        })
                        .collect();
                    pv(&g)
                })
                .collect();
            let batch = BatchGradients::from_updates(updates).unwrap();
            let est = [
                estimate_sigma2(&batch).unwrap(),
                estimate_d2(std::slice::from_ref(&g_s), &batch).unwrap(),
                estimate_tau2d2(std::slice::from_ref(&g_s), &batch).unwrap().value,
            ];
            for (a, e) in acc.iter_mut().zip(est) {
                a.0 += e;
                a.1 += e * e;
            }
        }
        acc.map(|(s, s2)| {
            let n = trials as f64;
            let mean = s / n;
            let var = (s2 / n - mean * mean) * n / (n - 1.0);
            (mean, (var / n).sqrt())
        })
    }

    #[test]
    fn estimators_are_unbiased_in_gaussian_model() {
        let [sigma, d2, tau] = monte_carlo(20_000, 11);
        // σ² of the mean of 8 standard normal vectors in 4 dims
        assert!((sigma.0 - 0.5).abs() < 4.0 * sigma.1, "{sigma:?}");
        let u2 = 0.3f64.powi(2) + 0.4f64.powi(2) + 0.2f64.powi(2) + 0.1f64.powi(2);
        assert!((d2.0 - u2).abs() < 4.0 * d2.1, "{d2:?}");
        let v = pv(&[1.0, -0.5, 0.25, 2.0]);
        let s = pv(&[1.3, -0.1, 0.05, 2.1]);
        let along = inner(&v, &s).unwrap() / s.norm_sq();
        let mut resid = v.clone();
        resid.axpy(-along, &s).unwrap();
        assert!(
            (tau.0 - resid.norm_sq()).abs() < 4.0 * tau.1,
            "{tau:?} vs {}",
            resid.norm_sq()
        );
    }

    proptest! {
        #[test]
        fn betas_minimize_quadratic_error(s2 in 0.0f64..10.0, d2 in 0.0f64..10.0, frac in 0.0f64..1.0) {
            let t2 = d2 * frac;
            let stats = compute_betas(s2, &[d2], &[t2]).unwrap();
            let st = &stats.sources[0];
            prop_assert!(st.beta_gp >= st.beta_da - 1e-15);
            for (beta, dist) in [(st.beta_da, d2), (st.beta_gp, t2)] {
                let err = |b: f64| (1.0 - b).powi(2) * s2 + b * b * dist;
                let best = (0..=1000).map(|k| k as f64 * 1e-3).fold(f64::INFINITY, |acc, b| acc.min(err(b)));
                prop_assert!(err(beta) <= best + 1e-12);
            }
        }

        #[test]
        fn estimates_scale_quadratically(c in 0.1f64..10.0, seed in 0u64..1000) {
            let mut r = rng::stream(seed, "scale", &[]);
            let mut draw = |n: usize| -> ParamVector {
                pv(&(0..n).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>())
            };
            let updates: Vec<ParamVector> = (0..5).map(|_| draw(3)).collect();
            let g_s = draw(3);
            let batch = BatchGradients::from_updates(updates.clone()).unwrap();
            let scaled = BatchGradients::from_updates(updates.iter().map(|g| g.scale(c)).collect()).unwrap();
            let base = estimate_delta_stats(&[vec![g_s.clone()]], &batch).unwrap();
            let big = estimate_delta_stats(&[vec![g_s.scale(c)]], &scaled).unwrap();
            let c2 = c * c;
            prop_assert!((big.sigma2_hat - c2 * base.sigma2_hat).abs() <= 1e-9 * big.sigma2_hat.abs().max(1.0));
            let (a, b) = (&base.sources[0], &big.sources[0]);
            prop_assert!((b.d2_hat - c2 * a.d2_hat).abs() <= 1e-9 * b.d2_hat.abs().max(1.0));
            prop_assert!((b.tau2d2_hat - c2 * a.tau2d2_hat).abs() <= 1e-9 * b.tau2d2_hat.abs().max(1.0));
            prop_assert!((a.beta_da - b.beta_da).abs() < 1e-9);
            prop_assert!((a.beta_gp - b.beta_gp).abs() < 1e-9);
        }
    }
}
