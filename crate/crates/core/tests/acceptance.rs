//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the console.
//! Pass criterion ids (`C1` .. `C9`) as arguments to run a subset:
//! `cargo test --release --test acceptance -- C3 C6`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fda_core::aggregate::{proj_plus, proj_plus_layerwise, AggregationRule};
use fda_core::autoweight::compute_betas;
use fda_core::cli::main_with_args;
use fda_core::cli::tasks::{run_semi_synthetic, BlobTask, SemiSyntheticConfig};
use fda_core::cli::validate::{validate_estimators, EstimatorValidationConfig};
use fda_core::datagen::{gen_synthetic, subsample, ShiftTransform, SyntheticSpec};
use fda_core::fedsim::FederationConfig;
use fda_core::linalg::{ParamVector, PiMeasure};
use fda_core::metrics::{
    exact_distance, exact_sigma2, monte_carlo_delta2, predicted_vs_actual_grid, GradientCache, GridConfig, MonteCarlo,
};
use fda_core::model::{gradient, loss, Arch, Dataset, Model, Targets};
use fda_core::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Criteria expected to fail; see the README for the analysis.
const KNOWN_FAILURES: &[&str] = &["C8"];

struct Verdict {
    pass: bool,
    detail: String,
}

type Check = fn() -> Verdict;

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn randn(r: &mut impl Rng) -> f64 {
    StandardNormal.sample(r)
}

// C1 --------------------------------------------------------------------------

fn max_rel_error(model: &Model, data: &Dataset) -> f64 {
    let h = 1e-5;
    let analytic = gradient(model, data).unwrap().to_flat();
    let theta = model.params().to_flat();
    let layout = model.params().layout();
    let at = |values: &[f64]| {
        let m = model
            .with_params(ParamVector::from_flat_with_layout(&layout, values).unwrap())
            .unwrap();
        loss(&m, data).unwrap()
    };
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut v = theta.clone();
        v[k] = theta[k] + h;
        let up = at(&v);
        v[k] = theta[k] - h;
        let down = at(&v);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

fn c1_gradients() -> Verdict {
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for arch in [Arch::MlpRegression, Arch::MlpClassifier] {
        for k in 0..20u64 {
            let mut r = rng::stream(1, "acceptance-gradcheck", &[arch as u64, k]);
            let (d, h, n) = (r.random_range(1..=6), r.random_range(1..=8), r.random_range(1..=10));
            let x: Vec<f64> = (0..n * d).map(|_| randn(&mut r)).collect();
            let (out, targets) = match arch {
                Arch::MlpRegression => {
                    let out = r.random_range(1..=4);
                    (out, Targets::Regression((0..n * out).map(|_| randn(&mut r)).collect()))
                }
                Arch::MlpClassifier => {
                    let out = r.random_range(2..=5);
                    (
                        out,
                        Targets::Classification((0..n).map(|_| r.random_range(0..out)).collect()),
                    )
                }
            };
            let data = Dataset::new("gradcheck", d, out, x, targets).unwrap();
            let model = Model::init(arch, d, h, out, &mut r).unwrap();
            worst = worst.max(max_rel_error(&model, &data));
            pairs += 1;
        }
    }
    verdict(
        worst < 1e-5,
        format!("max rel error {worst:.2e} over {pairs} pairs (limit 1e-5)"),
    )
}

// C2 --------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Independent flat-array positive projection.
fn reference_projection(t: &[f64], s: &[f64]) -> Vec<f64> {
    let ss = dot(s, s);
    let c = if ss > 0.0 { dot(t, s).max(0.0) / ss } else { 0.0 };
    s.iter().map(|x| c * x).collect()
}

fn c2_projection() -> Verdict {
    let mut failures = Vec::new();
    for k in 0..1000u64 {
        let mut r = rng::stream(2, "acceptance-projection", &[k]);
        let layout: Vec<usize> = (0..r.random_range(1..=4)).map(|_| r.random_range(1..=6)).collect();
        let draw = |r: &mut rng::StreamRng| {
            let scale = 10f64.powf(r.random_range(-3.0..3.0));
            ParamVector::new(
                layout
                    .iter()
                    .map(|&n| (0..n).map(|_| scale * randn(r)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let g_t = draw(&mut r);
        let mut g_s = draw(&mut r);
        // Every other case has a non-positive inner product.
        if (k % 2 == 0) == (dot(&g_t.to_flat(), &g_s.to_flat()) > 0.0) {
            g_s = g_s.scale(-1.0);
        }
        let (t, s) = (g_t.to_flat(), g_s.to_flat());
        let p = proj_plus(&g_t, &g_s).unwrap().to_flat();
        let tol = 1e-10 * dot(&t, &t).sqrt();
        let reference = reference_projection(&t, &s);
        let c = dot(&p, &s) / dot(&s, &s);
        let residual: f64 = p.iter().zip(&s).map(|(x, y)| (x - c * y).powi(2)).sum::<f64>().sqrt();
        let mut ok = residual <= tol
            && dot(&p, &s) >= -tol * dot(&s, &s).sqrt()
            && dot(&p, &p).sqrt() <= dot(&t, &t).sqrt() + tol
            && p.iter().zip(&reference).all(|(a, b)| (a - b).abs() <= tol);
        if dot(&t, &s) <= 0.0 {
            ok &= p.iter().all(|x| *x == 0.0);
        }
        let lw = proj_plus_layerwise(&g_t, &g_s).unwrap();
        for (l, (tl, sl)) in g_t.layers().iter().zip(g_s.layers()).enumerate() {
            let single = proj_plus(
                &ParamVector::new(vec![tl.clone()]).unwrap(),
                &ParamVector::new(vec![sl.clone()]).unwrap(),
            )
            .unwrap();
            ok &= lw.layers()[l] == single.layers()[0];
        }
        if !ok {
            failures.push(k);
        }
    }
    verdict(
        failures.is_empty(),
        format!("{} failures in 1000 cases {:?}", failures.len(), failures),
    )
}

// C3 --------------------------------------------------------------------------

fn c3_estimators() -> Verdict {
    let cfg = EstimatorValidationConfig {
        batches: 8,
        trials: 100_000,
        seed: 3,
        ..EstimatorValidationConfig::default()
    };
    let (v, u) = (&cfg.target_mean, &cfg.source);
    let m = v.len() as f64;
    let diff: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - b).collect();
    let truth = [
        ("sigma2", m * cfg.noise_std.powi(2) / cfg.batches as f64),
        ("d2", dot(&diff, &diff)),
        ("tau2d2", dot(v, v) - dot(u, v).powi(2) / dot(u, u)),
    ];
    let report = validate_estimators(&cfg).unwrap();
    let mut ok = report.checks.len() == 3;
    let mut parts = Vec::new();
    for (name, t) in truth {
        let Some(c) = report.checks.iter().find(|c| c.name == name) else {
            ok = false;
            continue;
        };
        let z = (c.mean - t) / c.std_error;
        ok &= z.abs() <= 4.0;
        parts.push(format!("{name} z={z:+.2}"));
    }
    verdict(ok, format!("{} (m=4, B=8, 1e5 trials, limit 4 s.e.)", parts.join(", ")))
}

// C4 --------------------------------------------------------------------------

fn c4_fedda_closed_form() -> Verdict {
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let mut r = rng::stream(4, "acceptance-closed-form", &[k]);
        let spec = SyntheticSpec {
            input_dim: r.random_range(2..=6),
            output_dim: r.random_range(1..=3),
            n_samples: r.random_range(60..=200),
            n_basis: r.random_range(3..=8),
            n_mixture: r.random_range(2..=4),
            shift_level: 0.0,
            seed: k,
        };
        let target = subsample(&gen_synthetic(&spec).unwrap(), spec.n_samples / 2, k).unwrap();
        let source = gen_synthetic(&spec.with_shift(r.random_range(0.0..1.0))).unwrap();
        let hidden = r.random_range(2..=8);
        let atoms: Vec<ParamVector> = (0..r.random_range(1..=3))
            .map(|_| {
                Model::init(Arch::MlpRegression, spec.input_dim, hidden, spec.output_dim, &mut r)
                    .unwrap()
                    .params()
                    .clone()
            })
            .collect();
        let pi = PiMeasure::new(atoms).unwrap();
        let template = Model::init(Arch::MlpRegression, spec.input_dim, hidden, spec.output_dim, &mut r).unwrap();
        let n = r.random_range(2..=20);
        let beta: f64 = r.random_range(0.0..=1.0);
        let sigma2 = exact_sigma2(&target, n, &template, &pi).unwrap();
        let d = exact_distance(&source, &target, &template, &pi).unwrap();
        let closed = (1.0 - beta).powi(2) * sigma2 + beta.powi(2) * d * d;
        let cache = GradientCache::new(&[source], &target, &template, &pi).unwrap();
        let mc = monte_carlo_delta2(
            &AggregationRule::fed_da(beta),
            &[beta],
            &cache,
            n,
            &MonteCarlo::new(4000, k),
        )
        .unwrap();
        worst = worst.max(((mc.delta2 - closed) / mc.std_error).abs());
    }
    verdict(
        worst <= 4.0,
        format!("worst |z| = {worst:.2} over 20 configs (limit 4 s.e.)"),
    )
}

// C5 --------------------------------------------------------------------------

fn c5_fedgp_regime() -> Verdict {
    let layout = [120, 80];
    let m: usize = layout.iter().sum();
    let (pop, n) = (400, 10);
    let mut wins = 0;
    let mut max_tau = 0.0f64;
    for k in 0..20u64 {
        let mut r = rng::stream(5, "acceptance-fedgp-regime", &[k]);
        let g_t: Vec<f64> = (0..m).map(|_| randn(&mut r)).collect();
        let gt2 = dot(&g_t, &g_t);
        let mut w: Vec<f64> = (0..m).map(|_| randn(&mut r)).collect();
        let c = dot(&w, &g_t) / gt2;
        w.iter_mut().zip(&g_t).for_each(|(x, t)| *x -= c * t);
        let wn = dot(&w, &w).sqrt();
        let scale: f64 = r.random_range(1.5..2.5);
        let angle = r.random_range(2.0f64..15.0).to_radians();
        let g_s: Vec<f64> = g_t
            .iter()
            .zip(&w)
            .map(|(t, o)| scale * (angle.cos() * t + angle.sin() * gt2.sqrt() * o / wn))
            .collect();
        let d2: f64 = g_t.iter().zip(&g_s).map(|(a, b)| (a - b).powi(2)).sum();
        // Per-sample noise with σ²(n) between d²/2 and 2d².
        let sigma2 = d2 * r.random_range(0.5..2.0);
        let s = (sigma2 * n as f64 / m as f64).sqrt();
        let samples: Vec<ParamVector> = (0..pop)
            .map(|_| {
                let z: Vec<f64> = g_t.iter().map(|t| t + s * randn(&mut r)).collect();
                ParamVector::from_flat_with_layout(&layout, &z).unwrap()
            })
            .collect();
        let source = ParamVector::from_flat_with_layout(&layout, &g_s).unwrap();
        let cache = GradientCache::from_gradients(vec![(samples, vec![source])], vec![1000]).unwrap();
        max_tau = max_tau.max(cache.orthogonal_sq(0).unwrap() / cache.distance_sq(0).unwrap());
        let res = cache
            .delta2_many(
                &[
                    (AggregationRule::fed_da(0.5), vec![0.5]),
                    (AggregationRule::fed_gp(0.5), vec![0.5]),
                ],
                n,
                &MonteCarlo::new(2000, k),
            )
            .unwrap();
        if res[1].delta2 < res[0].delta2 {
            wins += 1;
        }
    }
    verdict(
        wins >= 18 && max_tau <= 0.25,
        format!("FedGP(0.5) below FedDA(0.5) in {wins}/20 configs (need 18), m={m}, max tau2={max_tau:.3}"),
    )
}

// C6 --------------------------------------------------------------------------

fn grid_argmin(f: impl Fn(f64) -> f64) -> f64 {
    (0..=1000)
        .map(|i| i as f64 / 1000.0)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap()
}

fn c6_beta_optimality() -> Verdict {
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let mut r = rng::stream(6, "acceptance-betas", &[k]);
        let sigma2 = 10f64.powf(r.random_range(-2.0..1.0));
        let d2 = 10f64.powf(r.random_range(-2.0..1.0));
        let tau2d2 = d2 * r.random_range(0.0..=1.0);
        let stats = compute_betas(sigma2, &[d2], &[tau2d2]).unwrap();
        let da = grid_argmin(|b| (1.0 - b).powi(2) * sigma2 + b * b * d2);
        let gp = grid_argmin(|b| (1.0 - b).powi(2) * sigma2 + b * b * tau2d2);
        worst = worst
            .max((stats.betas_da()[0] - da).abs())
            .max((stats.betas_gp()[0] - gp).abs());
    }
    verdict(
        worst <= 1e-3,
        format!("max |beta - grid argmin| = {worst:.2e} over 100 triples (limit 1e-3)"),
    )
}

// C7 --------------------------------------------------------------------------

fn c7_grid() -> Verdict {
    let result = predicted_vs_actual_grid(&GridConfig::full(0)).unwrap();
    let agree = result.agreement_rate();
    let auto = result.auto_win_rate("FedDA(0.5)").unwrap_or(0.0);
    verdict(
        agree >= 0.6 && auto >= 0.7,
        format!(
            "{} cells: agreement {agree:.3} (need 0.6); auto FedDA <= FedDA(0.5) in {auto:.3} of high-shift cells (need 0.7)",
            result.cells.len()
        ),
    )
}

// C8 --------------------------------------------------------------------------

fn c8_noisy_features() -> Verdict {
    let rules = vec![
        AggregationRule::source_only(),
        AggregationRule::target_only(),
        AggregationRule::fed_da(0.5),
        AggregationRule::fed_gp(0.5),
    ];
    let cfg = SemiSyntheticConfig {
        task: BlobTask::default(),
        shifts: [0.0, 0.4, 0.8]
            .iter()
            .map(|&s| ShiftTransform::feature_noise(s, 0))
            .collect(),
        rules,
        federation: FederationConfig::new(AggregationRule::fed_da(0.5), 50, 0.5, 64, 16),
        seeds: vec![0, 1, 2],
    };
    let result = run_semi_synthetic(&cfg).unwrap();
    let acc = |shift: &ShiftTransform, rule: &str| result.mean_accuracy(shift, rule).unwrap();
    let source_only: Vec<f64> = cfg.shifts.iter().map(|s| acc(s, "SourceOnly")).collect();
    let monotone = source_only.windows(2).all(|w| w[1] <= w[0]);
    let noisiest = &cfg.shifts[2];
    let gap = 100.0 * (acc(noisiest, "FedGP(0.5)") - acc(noisiest, "FedDA(0.5)"));
    verdict(
        monotone && gap > 2.0,
        format!(
            "SourceOnly acc {:.3?} non-increasing: {monotone}; FedGP(0.5) - FedDA(0.5) at std 0.8 = {gap:+.2} points (need > 2)",
            source_only
        ),
    )
}

// C9 --------------------------------------------------------------------------

const DETERMINISM_RUN: &str = r#"{
    "kind": "single_run",
    "seed": 9,
    "task": {"type": "blobs", "n_sources": 4, "source_size": 200, "target_size": 64, "test_size": 200,
             "shift": {"kind": "feature_noise", "std": 0.4, "seed": 1}},
    "federation": {"rounds": 4, "lr_s": 0.5, "batch_s": 32, "batch_t": 16,
                   "rule": {"kind": "fed_gp", "betas": "auto"}}
}"#;

const DETERMINISM_SWEEP: &str = r#"{
    "kind": "semi_synthetic",
    "sweep": {
        "task": {"n_sources": 3, "source_size": 120, "target_size": 48, "test_size": 100},
        "shifts": [{"kind": "feature_noise", "std": 0.0, "seed": 0}, {"kind": "label_shift", "eta": 0.5, "seed": 0}],
        "rules": [{"kind": "fed_da", "betas": "auto"}, {"kind": "fed_gp", "betas": 0.5}],
        "federation": {"rounds": 3, "lr_s": 0.5, "batch_s": 32, "batch_t": 16, "rule": {"kind": "source_only"}},
        "seeds": [0, 1]
    }
}"#;

fn run_cli(config: &Path, out: &Path, threads: usize) -> i32 {
    main_with_args([
        "fda",
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        &threads.to_string(),
    ])
}

fn c9_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut compared = Vec::new();
    let mut ok = true;
    for (name, text, csv) in [
        ("single_run", DETERMINISM_RUN, "rounds.csv"),
        ("semi_synthetic", DETERMINISM_SWEEP, "semi_synthetic.csv"),
    ] {
        let config = dir.path().join(format!("{name}.json"));
        fs::write(&config, text).unwrap();
        let outputs: Vec<Vec<u8>> = [1, 8]
            .iter()
            .map(|&t| {
                let out = dir.path().join(format!("{name}-{t}"));
                ok &= run_cli(&config, &out, t) == 0;
                fs::read(out.join(csv)).unwrap_or_default()
            })
            .collect();
        ok &= !outputs[0].is_empty() && outputs[0] == outputs[1];
        compared.push(format!("{csv} ({} bytes)", outputs[0].len()));
    }
    verdict(ok, format!("{} identical at --threads 1 and 8", compared.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, Check); 9] = [
        ("C1", "gradient correctness", c1_gradients),
        ("C2", "projection invariants", c2_projection),
        ("C3", "estimator unbiasedness", c3_estimators),
        ("C4", "FedDA closed-form delta error", c4_fedda_closed_form),
        ("C5", "FedGP advantage regime", c5_fedgp_regime),
        ("C6", "beta optimality", c6_beta_optimality),
        ("C7", "synthetic grid reproduction", c7_grid),
        ("C8", "semi-synthetic shift ordering", c8_noisy_features),
        ("C9", "thread-count determinism", c9_determinism),
    ];
    // Libtest-style flags such as `--nocapture` are ignored.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed: Duration = start.elapsed();
        let known = KNOWN_FAILURES.contains(&id);
        let status = match (v.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{status:<12} {id} {name}: {} [{:.1}s]", v.detail, elapsed.as_secs_f64());
        if !v.pass && !known {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {}", unexpected.join(", "));
        ExitCode::FAILURE
    }
}
