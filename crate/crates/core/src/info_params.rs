//! Information parameters of an inference task and the score classification.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihoods::{Likelihood, LikelihoodPair};
use crate::linalg::SymMatrix;
use crate::rng::stream_rng;

/// How the null expectations were evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// Adaptive quadrature for continuous nulls, exact summation for discrete ones.
    Quadrature,
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum MethodUsed {
    Quadrature,
    ExactSum,
    /// Standard errors of `(β₁, β₂, β₃, β₄, β*)`.
    MonteCarlo {
        samples: usize,
        stderr: [f64; 5],
    },
    /// Supplied directly rather than computed.
    Given,
}

/// `β̄ = (β₁, β₂, β₃, β₄)` together with the null Fisher information `β*`
/// and the least-squares alignment `β_LS`.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta_star: Option<f64>,
    pub beta_ls: Option<f64>,
    pub method: MethodUsed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreClass {
    WellScored,
    IllScored(Sign),
}

impl fmt::Display for ScoreClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WellScored => f.write_str("well-scored"),
            Self::IllScored(Sign::Positive) => f.write_str("ill-scored(+)"),
            Self::IllScored(Sign::Negative) => f.write_str("ill-scored(-)"),
        }
    }
}

pub const DEFAULT_CLASSIFY_TOL: f64 = 1e-6;

impl InfoParams {
    pub fn from_betas(beta1: f64, beta2: f64, beta3: f64, beta4: f64) -> Self {
        Self {
            beta1,
            beta2,
            beta3,
            beta4,
            beta_star: None,
            beta_ls: None,
            method: MethodUsed::Given,
        }
    }

    pub fn with_beta_star(mut self, beta_star: f64) -> Self {
        self.beta_star = Some(beta_star);
        self
    }

    /// `[β₁, β₂, β₃, β₄]`.
    pub fn betas(&self) -> [f64; 4] {
        [self.beta1, self.beta2, self.beta3, self.beta4]
    }

    pub fn classify(&self, tol: f64) -> ScoreClass {
        classify(self, tol)
    }
}

impl fmt::Display for InfoParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.10}"));
        write!(
            f,
            "{:.10} {:.10} {:.10} {:.10} {} {} {}",
            self.beta1,
            self.beta2,
            self.beta3,
            self.beta4,
            opt(self.beta_star),
            opt(self.beta_ls),
            self.classify(DEFAULT_CLASSIFY_TOL)
        )
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonIntegrable(format!("{name} = {v}")))
    }
}

/// Computes `β̄`, `β*` and `β_LS` under the null law of `pair`.
pub fn compute(pair: &LikelihoodPair, method: &Method) -> Result<InfoParams> {
    match method {
        Method::Quadrature => compute_exact(pair),
        Method::MonteCarlo { samples, seed } => compute_monte_carlo(pair, *samples, *seed),
    }
}

fn compute_exact(pair: &LikelihoodPair) -> Result<InfoParams> {
    let (g, g0, null) = (&pair.pseudo, &pair.truth, &pair.null);
    let beta4 = finite("E₀ ∂g", null.expect(|y| g.d1(y, 0.0)))?;
    let beta1 = finite("Var₀ ∂g", null.expect(|y| (g.d1(y, 0.0) - beta4).powi(2)))?;
    let beta2 = finite("E₀ ∂g ∂g₀", null.expect(|y| g.d1(y, 0.0) * g0.d1(y, 0.0)))?;
    let beta3 = finite("E₀ ∂²g", -null.expect(|y| g.d2(y, 0.0)))?;
    let beta_star = finite("E₀ (∂g₀)²", null.expect(|y| g0.d1(y, 0.0).powi(2)))?;
    let second = null.expect(|y| y * y);
    let beta_ls = (second > 0.0).then(|| null.expect(|y| y * g0.d1(y, 0.0)) / second.sqrt());
    Ok(InfoParams {
        beta1,
        beta2,
        beta3,
        beta4,
        beta_star: Some(beta_star),
        beta_ls,
        method: if null.is_discrete() {
            MethodUsed::ExactSum
        } else {
            MethodUsed::Quadrature
        },
    })
}

/// Running sums over one chunk of null samples.
#[derive(Clone, Copy, Default)]
struct Sums {
    n: f64,
    // d1, d1², d1·d1₀, d2, d1₀², y², y·d1₀ and the squares needed for errors
    s: [f64; 7],
    sq: [f64; 7],
    d1_cubed: f64,
    d1_fourth: f64,
}

impl Sums {
    fn merge(mut self, o: Sums) -> Sums {
        self.n += o.n;
        for k in 0..7 {
            self.s[k] += o.s[k];
            self.sq[k] += o.sq[k];
        }
        self.d1_cubed += o.d1_cubed;
        self.d1_fourth += o.d1_fourth;
        self
    }
}

fn compute_monte_carlo(pair: &LikelihoodPair, samples: usize, seed: u64) -> Result<InfoParams> {
    if samples < 2 {
        return Err(crate::error::invalid(
            "samples",
            "need at least two Monte-Carlo samples",
        ));
    }
    const CHUNK: usize = 1 << 14;
    let chunks = samples.div_ceil(CHUNK);
    let (g, g0) = (&pair.pseudo, &pair.truth);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = CHUNK.min(samples - c * CHUNK);
            let mut acc = Sums::default();
            for _ in 0..len {
                let y = pair.null.sample(&mut rng);
                let d1 = g.d1(y, 0.0);
                let d10 = g0.d1(y, 0.0);
                let vals = [
                    d1,
                    d1 * d1,
                    d1 * d10,
                    g.d2(y, 0.0),
                    d10 * d10,
                    y * y,
                    y * d10,
                ];
                acc.n += 1.0;
                for k in 0..7 {
                    acc.s[k] += vals[k];
                    acc.sq[k] += vals[k] * vals[k];
                }
                acc.d1_cubed += d1 * d1 * d1;
                acc.d1_fourth += d1 * d1 * d1 * d1;
            }
            acc
        })
        // fixed-order reduction keeps the estimate deterministic
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Sums::default(), Sums::merge);

    let n = sums.n;
    let mean = |k: usize| sums.s[k] / n;
    let se = |k: usize| ((sums.sq[k] / n - mean(k).powi(2)).max(0.0) / n).sqrt();
    let beta4 = finite("E₀ ∂g", mean(0))?;
    let beta1 = finite("Var₀ ∂g", (mean(1) - beta4 * beta4) * n / (n - 1.0))?;
    // delta method for the variance of the centred square
    let m4c = sums.d1_fourth / n - 4.0 * beta4 * sums.d1_cubed / n + 6.0 * beta4 * beta4 * mean(1)
        - 3.0 * beta4.powi(4);
    // variance of the sample variance, floored by the O(1/n²) term that
    // dominates when |∂g| is nearly constant
    let se1 = ((m4c - beta1 * beta1).max(0.0) / n + 2.0 * beta1 * beta1 / (n * (n - 1.0))).sqrt();
    let second = mean(5);
    Ok(InfoParams {
        beta1,
        beta2: finite("E₀ ∂g ∂g₀", mean(2))?,
        beta3: finite("E₀ ∂²g", -mean(3))?,
        beta4,
        beta_star: Some(finite("E₀ (∂g₀)²", mean(4))?),
        beta_ls: (second > 0.0).then(|| mean(6) / second.sqrt()),
        method: MethodUsed::MonteCarlo {
            samples,
            stderr: [se1, se(2), se(3), se(0), se(4)],
        },
    })
}

pub fn classify(ip: &InfoParams, tol: f64) -> ScoreClass {
    if ip.beta4.abs() <= tol {
        ScoreClass::WellScored
    } else if ip.beta4 > 0.0 {
        ScoreClass::IllScored(Sign::Positive)
    } else {
        ScoreClass::IllScored(Sign::Negative)
    }
}

/// Whether `β₁ = β₂ = β₃ = β*` up to `tol`. False when `β*` is unknown.
pub fn check_rao(ip: &InfoParams, tol: f64) -> bool {
    let Some(star) = ip.beta_star else {
        return false;
    };
    let vals = [ip.beta1, ip.beta2, ip.beta3, star];
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo <= tol
}

/// Naive estimate `(1/N²) Σ_{i,j} ∂_w g(Y_ij, 0)` over ordered pairs.
pub fn score_estimator_beta4(y: &SymMatrix, g: &Likelihood) -> f64 {
    let n = y.n();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| y.row(i).iter().map(|&v| g.d1(v, 0.0)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / (n * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::builtin_from_spec;

    fn ip(spec: &str) -> InfoParams {
        compute(&builtin_from_spec(spec).unwrap(), &Method::Quadrature).unwrap()
    }

    fn close(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn table_rows() {
        assert!(close(
            ip("spiked_wigner:lambda=1,lambda0=1,c=0").betas(),
            [1.0, 1.0, 1.0, 0.0],
            1e-9
        ));
        assert!(close(
            ip("sbm:mu=0.25,mu0=0.25").betas(),
            [0.25, 0.25, 0.25, 0.0],
            1e-12
        ));
        assert!(close(
            ip("poisson_bernoulli:lambda=2").betas(),
            [0.5, 0.5, 0.5, 0.0],
            1e-9
        ));
        assert_eq!(ip("sparse_rademacher:p=0.3,lambda=0.4").beta2, 0.0);
    }

    #[test]
    fn misspecified_sbm_score() {
        let b = ip("sbm:mu=0.2,mu0=0.2,p=0.4");
        assert!((b.beta4 - 0.2 * 0.2 / 0.48).abs() < 1e-12);
    }

    #[test]
    fn classification() {
        assert_eq!(
            classify(&InfoParams::from_betas(1.0, 1.0, 1.0, 0.0), 1e-6),
            ScoreClass::WellScored
        );
        assert_eq!(
            ip("spiked_wigner:c=1").classify(1e-6),
            ScoreClass::IllScored(Sign::Positive)
        );
        assert_eq!(
            classify(&InfoParams::from_betas(1.0, 1.0, 1.0, -0.3), 1e-6),
            ScoreClass::IllScored(Sign::Negative)
        );
    }

    #[test]
    fn rao_relation() {
        assert!(check_rao(&ip("sbm"), 1e-9));
        assert!(!check_rao(&ip("sbm:mu=0.3,mu0=0.2"), 1e-6));
        assert!(check_rao(
            &InfoParams::from_betas(1.0, 1.0, 1.0, 0.0).with_beta_star(1.0),
            1e-12
        ));
    }

    #[test]
    fn naive_score_estimator() {
        let pair = builtin_from_spec("spiked_wigner").unwrap();
        let y = SymMatrix::from_upper(4, |_, _| 0.7);
        assert!((score_estimator_beta4(&y, &pair.pseudo) - 0.7).abs() < 1e-15);
        let sbm = builtin_from_spec("sbm:mu=0.25").unwrap();
        assert_eq!(
            score_estimator_beta4(&SymMatrix::zeros(3), &sbm.pseudo),
            -0.5
        );
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let pair = builtin_from_spec("signed_wigner:lambda=1.3,lambda0=0.8").unwrap();
        let exact = compute(&pair, &Method::Quadrature).unwrap();
        let mc = compute(
            &pair,
            &Method::MonteCarlo {
                samples: 200_000,
                seed: 5,
            },
        )
        .unwrap();
        let MethodUsed::MonteCarlo { stderr, .. } = mc.method else {
            panic!()
        };
        for (k, (a, b)) in mc.betas().iter().zip(exact.betas()).enumerate() {
            let se = [stderr[0], stderr[1], stderr[2], stderr[3]][k];
            assert!(
                (a - b).abs() <= 4.0 * se + 1e-10,
                "component {k}: {a} vs {b} (se {se})"
            );
        }
    }
}
