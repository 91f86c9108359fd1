//! Acceptance criteria at desk scale. Each test prints one
//! `criterion <id>: PASS|FAIL (...)` line and asserts the outcome.

use rand::Rng as _;
use rayon::prelude::*;

use pml_core::datagen::{sample_signal, SignalEnsemble};
use pml_core::equivalence::{coarse_sufficient, universal_task, CoarseCondition};
use pml_core::gaussian_equiv::{
    exact_argmax, free_energy_exact, pml_pair_objective, sample_disorder, GaussianEquivalent,
};
use pml_core::harness::{
    compare_to_theory, info_table, run_experiment, Comparison, ExperimentConfig, PredictionKind,
    ResultRecord,
};
use pml_core::info_params::{check_rao, compute, InfoParams, Method};
use pml_core::likelihoods::{builtin_from_spec, ParameterSpace};
use pml_core::linalg::SymMatrix;
use pml_core::parisi::{minimize_psi, ParisiProblem, PsiOptions};
use pml_core::rng::stream_rng;
use pml_core::special::norm_quantile;
use pml_core::theory::{bbp_ratio, ls_cosine_limit, ls_value_limit, ls_value_quoted};

fn verdict(id: &str, pass: bool, detail: impl AsRef<str>) {
    use std::io::Write as _;
    // straight to stderr so the line survives libtest output capture
    let line = format!(
        "criterion {id}: {} ({})",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn quad(spec: &str) -> InfoParams {
    compute(&builtin_from_spec(spec).unwrap(), &Method::Quadrature).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn experiment(toml: &str) -> (ExperimentConfig, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(toml)
        .unwrap()
        .with_output(dir.path());
    (cfg, dir)
}

fn records_for<'a>(records: &'a [ResultRecord], estimator: &str) -> Vec<&'a ResultRecord> {
    records
        .iter()
        .filter(|r| r.estimator == estimator)
        .collect()
}

#[test]
fn criterion_1_table() {
    let rows = info_table().unwrap();
    let worst = rows.iter().map(|r| r.max_err).fold(0.0, f64::max);
    let pass = rows.len() == 6 && rows.iter().all(|r| r.pass);
    let sr = rows
        .iter()
        .find(|r| r.label == "sparse Rademacher")
        .unwrap();
    verdict(
        "1",
        pass,
        format!("6 rows, max abs err {worst:.1e}; sparse Rademacher beta1 {:.6} = lambda^2 p (printed lambda p = {})", sr.computed[0], sr.printed[0]),
    );
    assert!(pass);
}

#[test]
fn criterion_2_rao() {
    let well_specified = [
        "spiked_wigner:lambda=1.3,lambda0=1.3",
        "sbm:mu=0.3,mu0=0.3",
        "signed_wigner:lambda=0.9,lambda0=0.9",
        "sparse_pca:lambda=1.1,lambda0=1.1,rho=0.2",
        "poisson_bernoulli:lambda=2.5",
        "sparse_rademacher:lambda=0.2,p=0.4,pseudo=true",
        "squared_entries:lambda=0.8",
    ];
    let mut worst: f64 = 0.0;
    let mut all = true;
    for spec in well_specified {
        let ip = quad(spec);
        let v = [ip.beta1, ip.beta2, ip.beta3, ip.beta_star.unwrap()];
        let gap = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - v.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        worst = worst.max(gap);
        all &= check_rao(&ip, 1e-6) && gap <= 1e-6;
    }
    let mis = !check_rao(&quad("sbm:mu=0.3,mu0=0.2"), 1e-6);
    let pass = all && mis;
    verdict(
        "2",
        pass,
        format!(
            "{} well-specified pairs, max gap {worst:.1e}; misspecified SBM rejected: {mis}",
            well_specified.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_sbm_null_mean() {
    let mu = 0.3;
    let mut worst: f64 = 0.0;
    let mut zero_exact = false;
    for p in [0.3, 0.4, 0.5, 0.6] {
        let b4 = quad(&format!("sbm:mu={mu},mu0={mu},p={p}")).beta4;
        let want = mu * (1.0 - 2.0 * p) / (2.0 * p * (1.0 - p));
        worst = worst.max((b4 - want).abs());
        if p == 0.5 {
            zero_exact = b4 == 0.0;
        }
    }
    let pass = worst <= 1e-8 && zero_exact;
    verdict(
        "3",
        pass,
        format!("max abs err {worst:.1e}, beta4 exactly zero at p = 0.5: {zero_exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_universal_round_trip() {
    let mut rng = stream_rng(2024, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let b = InfoParams::from_betas(
            rng.random_range(0.1..5.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..5.0),
            rng.random_range(-1.5..1.5),
        );
        let back = compute(&universal_task(&b).unwrap(), &Method::Quadrature).unwrap();
        for (x, y) in back.betas().iter().zip(b.betas()) {
            worst = worst.max((x - y).abs());
        }
    }
    let pass = worst <= 1e-6;
    verdict(
        "4",
        pass,
        format!("20 random tasks, max abs err {worst:.1e}"),
    );
    assert!(pass);
}

fn bbp_records() -> (Vec<ResultRecord>, ExperimentConfig, tempfile::TempDir) {
    let (cfg, dir) = experiment(
        r#"
        id = "accept-bbp"
        model = "spiked_wigner"
        sweep = { param = "lambda0", values = [0.5, 1.5, 2.0, 3.0] }
        n = [2000]
        seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
        estimators = ["ls-spectral"]
        traces = false
        comparison = { prediction = "ls-cosine", tol = 0.05 }
        "#,
    );
    let records = run_experiment(&cfg).unwrap();
    (records, cfg, dir)
}

/// Well-specified spiked Wigner with `λ = λ₀`: `β̄ = (λ², λ², λ², 0)`.
fn wigner_betas(lambda0: f64) -> InfoParams {
    let l2 = lambda0 * lambda0;
    InfoParams::from_betas(l2, l2, l2, 0.0)
}

#[test]
fn criterion_5_least_squares_all_space() {
    let (records, cfg, _dir) = bbp_records();
    assert!(records.iter().all(ResultRecord::is_ok));

    // 5a: cosine; above threshold within 0.05 of the limit, below it under 0.1
    let report = compare_to_theory(&records, cfg.comparison.as_ref().unwrap(), |_| false).unwrap();
    let mut pass_a = true;
    let mut details = Vec::new();
    for row in &report.rows {
        let lambda0 = row.x.unwrap();
        let ip = wigner_betas(lambda0);
        let ok = if bbp_ratio(&ip, 1.0) > 1.0 {
            row.abs_err <= 0.05
        } else {
            row.empirical < 0.1
        };
        pass_a &= ok;
        details.push(format!(
            "l0={lambda0}: {:.3} vs {:.3}",
            row.empirical,
            ls_cosine_limit(&ip, 1.0)
        ));
    }
    verdict("5a", pass_a, details.join(", "));

    // 5b: normalized maximum of −½‖Y − λxxᵀ/√N‖² + ½‖Y‖² against the quoted value formula
    let mut pass_b = true;
    let mut pass_derived = true;
    let mut details = Vec::new();
    for &lambda0 in &[0.5, 1.5, 2.0, 3.0] {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.x == Some(lambda0))
            .map(|r| r.objective)
            .collect();
        let emp = mean(&vals);
        let ip = wigner_betas(lambda0);
        let quoted = ls_value_quoted(&ip, 1.0);
        let derived = ls_value_limit(&ip, 1.0);
        pass_b &= (emp - quoted).abs() <= 0.1;
        pass_derived &= (emp - derived).abs() <= 0.1;
        details.push(format!(
            "l0={lambda0}: {emp:.3} vs quoted {quoted:.3} / derived {derived:.3}"
        ));
    }
    verdict(
        "5b",
        pass_b,
        format!(
            "{}; derived theta^2/(2 beta3) within 0.1: {pass_derived}",
            details.join(", ")
        ),
    );
    assert!(pass_a, "5a failed");
    assert!(
        pass_derived,
        "empirical value disagrees with the derived limit"
    );
    assert!(
        pass_b,
        "5b: empirical values disagree with the quoted formula (a factor of ~2 above threshold)"
    );
}

#[test]
fn criterion_6_sparse_rademacher_failure() {
    let (cfg, _dir) = experiment(
        r#"
        id = "accept-sparse"
        model = "sparse_rademacher"
        params = { p = 0.5 }
        sweep = { param = "lambda", values = [0.5, 1.0, 2.0] }
        n = [1500]
        seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
        estimators = ["ls", "ls-corrected"]
        max_iter = 200
        traces = false
        comparison = { prediction = "ls-failure", tol = 0.08 }
        "#,
    );
    let records = run_experiment(&cfg).unwrap();
    let report = compare_to_theory(&records, cfg.comparison.as_ref().unwrap(), |_| false).unwrap();
    let worst = records.iter().map(|r| r.cos.abs()).fold(0.0, f64::max);

    let (mle_cfg, _mle_dir) = experiment(
        r#"
        id = "accept-sparse-mle"
        model = "sparse_rademacher"
        params = { p = 0.5, lambda = 2 }
        n = [1500]
        seeds = [0, 1, 2]
        estimators = ["mle"]
        max_iter = 200
        traces = false
        "#,
    );
    let mle = run_experiment(&mle_cfg).unwrap();
    let mle_min = mle
        .iter()
        .map(|r| if r.is_ok() { r.cos.abs() } else { 0.0 })
        .fold(f64::INFINITY, f64::min);
    let pass = report.pass && mle_min > 0.2;
    verdict("6", pass, format!("{} ls runs, max |cos| {worst:.3} (< 0.08 each); mle at lambda=2 min |cos| {mle_min:.3} (> 0.2)", records.len()));
    assert!(report.pass, "least squares correlated with the signal");
    assert!(mle_min > 0.2, "true-likelihood ascent failed to correlate");
}

#[test]
fn criterion_7_ill_scored_collapse() {
    let (cfg, _dir) = experiment(
        r#"
        id = "accept-collapse"
        model = "spiked_wigner"
        params = { lambda0 = 2, lambda = 1, c = 1 }
        n = [2500]
        seeds = [0, 1, 2, 3, 4]
        estimators = ["pmle", "pmle-corrected"]
        max_iter = 300
        traces = false
        comparison = { prediction = "ill-scored", tol = 0.01 }
        "#,
    );
    let records = run_experiment(&cfg).unwrap();
    assert!(records.iter().all(ResultRecord::is_ok));
    let report = compare_to_theory(&records, cfg.comparison.as_ref().unwrap(), |_| false).unwrap();
    let plain = records_for(&records, "pmle");
    let corrected = records_for(&records, "pmle-corrected");
    // x and −x score alike once β₄ dominates, so the collapse may land on either sign
    let ones_min = plain
        .iter()
        .map(|r| r.cos_with_ones.abs())
        .fold(f64::INFINITY, f64::min);
    let plain_max = plain.iter().map(|r| r.cos.abs()).fold(0.0, f64::max);
    let lift_min = plain
        .iter()
        .zip(&corrected)
        .map(|(p, c)| c.cos.abs() - p.cos.abs())
        .fold(f64::INFINITY, f64::min);
    let pass = report.pass && ones_min > 0.99 && plain_max < 0.1 && lift_min >= 0.2;
    verdict(
        "7",
        pass,
        format!("uncorrected |cos with ones| min {ones_min:.4}, |cos| max {plain_max:.3}; corrected minus uncorrected |cos| min {lift_min:.3}"),
    );
    assert!(pass);
}

/// Least-squares fit of `a + b/N`; returns `a`.
fn intercept_in_inverse_n(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(n, _)| 1.0 / n).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    my - sxy / sxx * mx
}

#[test]
fn criterion_8_variational_vs_brute_force() {
    let beta = InfoParams::from_betas(1.0, 0.0, 0.0, 0.0);
    let omega = ParameterSpace::pm_one();
    let mut points = Vec::new();
    for n in [10usize, 12, 14] {
        let maxima: Vec<f64> = (0..200u64)
            .into_par_iter()
            .map(|rep| {
                let disorder = sample_disorder(n, 1_000 * n as u64 + rep);
                // Σᵢ gᵢᵢ/√N is constant on {±1}ᴺ with mean zero; dropping it leaves E max H unchanged
                let diagonal: f64 =
                    (0..n).map(|i| disorder.get(i, i)).sum::<f64>() / (n as f64).sqrt();
                let ge = GaussianEquivalent::with_disorder(beta.clone(), disorder, vec![1.0; n])
                    .unwrap();
                (exact_argmax(&ge.pair_objective(&omega).unwrap(), 1e-12)
                    .unwrap()
                    .value
                    - diagonal)
                    / n as f64
            })
            .collect();
        points.push((n as f64, mean(&maxima)));
    }
    let brute = intercept_in_inverse_n(&points);
    let problem = ParisiProblem::new(beta, omega.clone(), SignalEnsemble::rademacher().law());
    let psi = minimize_psi(&problem, 1.0, 0.0, None, &PsiOptions::default()).unwrap();
    let pass_sk = (psi.psi - brute).abs() <= 0.08;

    // β₁ = 0: ψ(S, M) = β₂M²/2 − β₃S²/4 exactly
    let mut worst: f64 = 0.0;
    let cases = [
        ([0.0, 1.0, 1.0, 0.0], ParameterSpace::pm_one(), 1.0, 0.5),
        ([0.0, 2.0, 0.5, 0.0], ParameterSpace::pm_one(), 1.0, -0.8),
        (
            [0.0, 1.5, 1.0, 0.0],
            ParameterSpace::interval(-1.0, 1.0).unwrap(),
            0.5,
            0.3,
        ),
    ];
    for (b, om, s, m) in cases {
        let ip = InfoParams::from_betas(b[0], b[1], b[2], b[3]);
        let problem = ParisiProblem::new(ip, om, SignalEnsemble::rademacher().law());
        let got = minimize_psi(&problem, s, m, None, &PsiOptions::default())
            .unwrap()
            .psi;
        worst = worst.max((got - (b[1] * m * m / 2.0 - b[2] * s * s / 4.0)).abs());
    }
    let pass_zero = worst <= 1e-8;
    let pass = pass_sk && pass_zero;
    let levels: Vec<String> = points
        .iter()
        .map(|(n, v)| format!("N={n}: {v:.4}"))
        .collect();
    verdict(
        "8",
        pass,
        format!(
            "psi {:.4} (bracket width {:.3}) vs brute-force extrapolation {brute:.4} [{}]; beta1=0 max err {worst:.1e}",
            psi.psi,
            psi.certificate.width,
            levels.join(", ")
        ),
    );
    assert!(pass);
}

/// SBM data and a Gaussian disorder coupled through the same uniforms:
/// `Y = 1{U < ½ + μ₀w}` and `G = −Φ⁻¹(U)`.
fn coupled_sbm(n: usize, mu0: f64, x0: &[f64], seed: u64) -> (SymMatrix, SymMatrix) {
    let mut rng = stream_rng(seed, 9);
    let mut y = SymMatrix::zeros(n);
    let mut g = SymMatrix::zeros(n);
    let rn = (n as f64).sqrt();
    for i in 0..n {
        for j in i..n {
            let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
            let p = 0.5 + mu0 * x0[i] * x0[j] / rn;
            y.set(i, j, if u < p { 1.0 } else { 0.0 });
            g.set(i, j, -norm_quantile(u));
        }
    }
    (y, g)
}

#[test]
fn criterion_9_universality_gap() {
    let mu = 0.5;
    let pair = builtin_from_spec(&format!("sbm:mu={mu},mu0={mu}")).unwrap();
    let beta = compute(&pair, &Method::Quadrature).unwrap();
    let inverse_temperature = 4.0;
    let sizes = [8usize, 12, 16, 20];
    let mut gaps = Vec::new();
    for &n in &sizes {
        let diffs: Vec<f64> = (0..200u64)
            .into_par_iter()
            .map(|rep| {
                let seed = 77_000 * n as u64 + rep;
                let x0 = sample_signal(&SignalEnsemble::rademacher(), n, seed);
                let (y, g) = coupled_sbm(n, mu, &x0, seed);
                let f_pml = free_energy_exact(
                    &pml_pair_objective(&pair, &y, &x0).unwrap(),
                    inverse_temperature,
                    None,
                )
                .unwrap();
                let ge = GaussianEquivalent::with_disorder(beta.clone(), g, x0).unwrap();
                let f_gauss = free_energy_exact(
                    &ge.pair_objective(&pair.omega).unwrap(),
                    inverse_temperature,
                    None,
                )
                .unwrap();
                f_pml.value - f_gauss.value
            })
            .collect();
        gaps.push(mean(&diffs).abs());
    }
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    // O(N^{-1/2}): gap(8)/gap(20) should be about √(20/8)
    let observed = gaps[0] / gaps[3];
    let expected = (20.0f64 / 8.0).sqrt();
    let ratio_ok = observed / expected <= 2.0 && expected / observed <= 2.0;
    let pass = decreasing && ratio_ok;
    let listing: Vec<String> = sizes
        .iter()
        .zip(&gaps)
        .map(|(n, g)| format!("N={n}: {g:.4}"))
        .collect();
    verdict(
        "9",
        pass,
        format!(
            "|gap| {}; ratio 8/20 {observed:.2} vs sqrt(20/8) {expected:.2}",
            listing.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_coarse_equivalence_argmax() {
    let omega = ParameterSpace::pm_one();
    let base = InfoParams::from_betas(1.2, 0.8, 0.7, 0.0);
    // (√β₁ : β₂ : β₃) proportional with factor 3; the second pair differs in β₃ only, which
    // is inert on the constant-norm {±1}ᴺ
    let scaled = InfoParams::from_betas(9.0 * 1.2, 3.0 * 0.8, 3.0 * 0.7, 0.0);
    let other_curvature = InfoParams::from_betas(9.0 * 1.2, 3.0 * 0.8, 0.1, 0.0);
    let report = coarse_sufficient(&base, &scaled, &omega, None, None).unwrap();
    let mut mismatches = 0;
    let mut total = 0;
    for n in 2..=12usize {
        let outcomes: Vec<bool> = (0..50u64)
            .into_par_iter()
            .map(|rep| {
                let seed = 5_000 * n as u64 + rep;
                let x0 = sample_signal(&SignalEnsemble::rademacher(), n, seed);
                let make = |b: &InfoParams| {
                    GaussianEquivalent::new(b.clone(), x0.clone(), seed)
                        .pair_objective(&omega)
                        .unwrap()
                };
                let a = exact_argmax(&make(&base), 1e-12).unwrap().points;
                let b = exact_argmax(&make(&scaled), 1e-12).unwrap().points;
                let c = exact_argmax(&make(&other_curvature), 1e-12).unwrap().points;
                a == b && a == c
            })
            .collect();
        total += outcomes.len();
        mismatches += outcomes.iter().filter(|ok| !**ok).count();
    }
    let pass = mismatches == 0 && report.coarse_sufficient_sqrt_beta1 == CoarseCondition::RatioAll;
    verdict("10", pass, format!("{total} replicates over N = 2..12, {mismatches} argmax sets differ; sqrt-ratio condition {}", report.coarse_sufficient_sqrt_beta1));
    assert!(pass);
}

#[test]
fn comparison_config_rejects_unknown_prediction() {
    let bad = "id = \"x\"\nmodel = \"sbm\"\nn = [4]\nseeds = [0]\nestimators = [\"pmle\"]\ncomparison = { prediction = \"nope\", tol = 1 }";
    assert!(ExperimentConfig::from_toml(bad).is_err());
    let ok = Comparison {
        prediction: PredictionKind::LsValue,
        tol: 0.1,
        critical_window: 0.0,
    };
    assert_eq!(
        ok.prediction.metric(),
        pml_core::harness::Metric::ObjectivePerN
    );
}
