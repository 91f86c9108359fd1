//! Pseudo-maximum-likelihood estimators: projected gradient ascent, the
//! score-corrected variant and spectral least squares.

use std::fmt;
use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;

use crate::datagen::ObservationMatrix;
use crate::error::{Error, Result};
use crate::gaussian_equiv::{cos_with_ones, overlaps, OverlapStats};
use crate::info_params::{score_estimator_beta4, InfoParams};
use crate::likelihoods::{Likelihood, LikelihoodPair, ParameterSpace};
use crate::linalg::{dot, top_eigenpair, LanczosOptions, SymMatrix};
use crate::optimize::{projected_ascent, AscentOptions};
use crate::rng::stream_rng;
use crate::theory::ls_radius_sq;

const INIT_STREAM: u64 = u64::MAX - 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform on the hull of Ω.
    Random {
        seed: u64,
    },
    /// Top eigenvector of the score matrix `∂g(Y, 0)`, scaled to the Ω-ball.
    Spectral,
    Given(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub stats: OverlapStats,
    pub cos_with_ones: f64,
}

#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub xhat: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Objective at `xhat` (after rounding for finite Ω).
    pub objective: f64,
    /// Objective at the end of the relaxed ascent.
    pub relaxed_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub estimator_id: EstimatorId,
    pub seed: u64,
    pub stats: OverlapStats,
    pub cos_with_ones: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorId {
    Pmle,
    PmleCorrected,
    /// Ascent with the true likelihood.
    Mle,
    /// Gaussian pseudo-likelihood over Ω.
    Ls,
    LsCorrected,
    /// Gaussian pseudo-likelihood over ℝᴺ, solved spectrally.
    LsSpectral,
    LsSpectralCorrected,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 7] = [
        Self::Pmle,
        Self::PmleCorrected,
        Self::Mle,
        Self::Ls,
        Self::LsCorrected,
        Self::LsSpectral,
        Self::LsSpectralCorrected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pmle => "pmle",
            Self::PmleCorrected => "pmle-corrected",
            Self::Mle => "mle",
            Self::Ls => "ls",
            Self::LsCorrected => "ls-corrected",
            Self::LsSpectral => "ls-spectral",
            Self::LsSpectralCorrected => "ls-spectral-corrected",
        }
    }

    pub fn is_corrected(self) -> bool {
        matches!(
            self,
            Self::PmleCorrected | Self::LsCorrected | Self::LsSpectralCorrected
        )
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| crate::error::invalid("estimator", format!("unknown estimator `{s}`")))
    }
}

/// The subtracted mean score and ridge added back by the score correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correction {
    pub beta4_hat: f64,
    pub alpha: f64,
}

impl Correction {
    /// Coefficient of `x̄²` in the `Σ_{i≤j}` objective. The pair sum counts
    /// each off-diagonal entry once, so both terms carry a factor ½.
    fn coefficient(&self, n: usize) -> f64 {
        let n = n as f64;
        -0.5 * n.powf(1.5) * self.beta4_hat + 0.5 * n * self.alpha
    }
}

enum Kernel {
    /// `g(y, w) − g(y, 0) = A·w + q·w²`.
    Quadratic {
        a: SymMatrix,
        q: f64,
    },
    Generic {
        lik: Likelihood,
        base: f64,
    },
}

/// `Σ_{i≤j} [g(Y_ij, x_i x_j/√N) − g(Y_ij, 0)]`, plus an optional correction.
/// Points where some `w` leaves the likelihood domain evaluate to NaN.
pub struct PmlObjective<'a> {
    y: &'a SymMatrix,
    kernel: Kernel,
    correction: Option<Correction>,
}

impl<'a> PmlObjective<'a> {
    pub fn new(y: &'a SymMatrix, lik: &Likelihood, correction: Option<Correction>) -> Self {
        let kernel = match lik.quadratic() {
            Some(form) => Kernel::Quadratic {
                a: y.map(|v| form.scale * (v - form.shift)),
                q: form.curvature,
            },
            None => {
                let n = y.n();
                let base = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        y.row(i)[i..]
                            .iter()
                            .map(|&v| lik.logdensity(v, 0.0))
                            .sum::<f64>()
                    })
                    .sum();
                Kernel::Generic {
                    lik: lik.clone(),
                    base,
                }
            }
        };
        Self {
            y,
            kernel,
            correction,
        }
    }

    fn n(&self) -> usize {
        self.y.n()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let rn = (n as f64).sqrt();
        let main = match &self.kernel {
            Kernel::Quadratic { a, q } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                let quart: f64 = x.iter().map(|v| v.powi(4)).sum();
                a.upper_quadratic_form(x) / rn + q / n as f64 * 0.5 * (sq * sq + quart)
            }
            Kernel::Generic { lik, base } => {
                let (lo, hi) = lik.w_domain();
                let total: f64 = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let row = self.y.row(i);
                        let mut s = 0.0;
                        for j in i..n {
                            let w = x[i] * x[j] / rn;
                            if !(lo < w && w < hi) {
                                return f64::NAN;
                            }
                            s += lik.logdensity(row[j], w);
                        }
                        s
                    })
                    .sum();
                total - base
            }
        };
        main + self.correction_value(x)
    }

    fn correction_value(&self, x: &[f64]) -> f64 {
        match &self.correction {
            Some(c) => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                c.coefficient(x.len()) * mean * mean
            }
            None => 0.0,
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let rn = (n as f64).sqrt();
        let mut grad = match &self.kernel {
            Kernel::Quadratic { a, q } => {
                let mut ax = vec![0.0; n];
                a.matvec(x, &mut ax);
                let sq: f64 = x.iter().map(|v| v * v).sum();
                let qn = q / n as f64;
                (0..n)
                    .map(|k| {
                        (ax[k] + a.get(k, k) * x[k]) / rn
                            + qn * (2.0 * sq * x[k] + 2.0 * x[k].powi(3))
                    })
                    .collect::<Vec<_>>()
            }
            Kernel::Generic { lik, .. } => (0..n)
                .into_par_iter()
                .map(|k| {
                    let row = self.y.row(k);
                    let mut s = 0.0;
                    for j in 0..n {
                        if j != k {
                            s += lik.d1(row[j], x[k] * x[j] / rn) * x[j];
                        }
                    }
                    (s + 2.0 * x[k] * lik.d1(row[k], x[k] * x[k] / rn)) / rn
                })
                .collect(),
        };
        if let Some(c) = &self.correction {
            let mean = x.iter().sum::<f64>() / n as f64;
            let dg = 2.0 * c.coefficient(n) * mean / n as f64;
            grad.iter_mut().for_each(|g| *g += dg);
        }
        grad
    }

    /// The score matrix `∂g(Y, 0)`, adjusted for the correction.
    fn apply_score(&self, v: &[f64], out: &mut [f64]) {
        match &self.kernel {
            Kernel::Quadratic { a, .. } => a.matvec(v, out),
            Kernel::Generic { .. } => unreachable!("generic kernels materialize the score matrix"),
        }
    }
}

fn score_matrix(y: &SymMatrix, lik: &Likelihood) -> Option<SymMatrix> {
    lik.quadratic().is_none().then(|| y.map(|v| lik.d1(v, 0.0)))
}

/// Top eigenvector of `T − β̂₄J + (α/√N)J` (or `T` uncorrected), scaled so
/// that its entries fit the Ω-ball, with the sign fixed by `Σu ≥ 0`.
fn spectral_start(obj: &PmlObjective, lik: &Likelihood, omega: &ParameterSpace) -> Vec<f64> {
    let n = obj.n();
    let rn = (n as f64).sqrt();
    let dense = score_matrix(obj.y, lik);
    let shift = obj.correction.map_or(0.0, |c| -c.beta4_hat + c.alpha / rn);
    let apply = |v: &[f64], out: &mut [f64]| {
        match &dense {
            Some(t) => t.matvec(v, out),
            None => obj.apply_score(v, out),
        }
        if shift != 0.0 {
            let s = shift * v.iter().sum::<f64>();
            out.iter_mut().for_each(|o| *o += s);
        }
    };
    let ep = top_eigenpair(n, apply, &LanczosOptions::default());
    let sign = if ep.vector.iter().sum::<f64>() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let scale = sign * omega.bound() * rn;
    ep.vector.iter().map(|u| omega.project(scale * u)).collect()
}

fn start_point(
    init: &Init,
    obj: &PmlObjective,
    lik: &Likelihood,
    omega: &ParameterSpace,
) -> Result<Vec<f64>> {
    let n = obj.n();
    match init {
        Init::Random { seed } => {
            let (lo, hi) = omega.hull();
            let mut rng = stream_rng(*seed, INIT_STREAM);
            Ok((0..n)
                .map(|_| {
                    if lo == hi {
                        lo
                    } else {
                        rng.random_range(lo..=hi)
                    }
                })
                .collect())
        }
        Init::Spectral => Ok(spectral_start(obj, lik, omega)),
        Init::Given(x) if x.len() == n => Ok(x.iter().map(|&v| omega.project(v)).collect()),
        Init::Given(x) => Err(Error::DimensionMismatch {
            expected: n,
            got: x.len(),
        }),
    }
}

fn trace_row(iter: usize, x: &[f64], objective: f64, x0: &[f64]) -> TraceRow {
    TraceRow {
        iter,
        objective,
        stats: overlaps(x, x0).unwrap_or_default(),
        cos_with_ones: cos_with_ones(x),
    }
}

fn ascend(
    lik: &Likelihood,
    omega: &ParameterSpace,
    obs: &ObservationMatrix,
    correction: Option<Correction>,
    init: &Init,
    opts: &AscentOptions,
    estimator_id: EstimatorId,
) -> Result<EstimateResult> {
    let obj = PmlObjective::new(&obs.entries, lik, correction);
    let start = start_point(init, &obj, lik, omega)?;
    let x0 = &obs.signal;
    let mut trace = Vec::new();
    let out = projected_ascent(
        |x| obj.value(x),
        |x| obj.gradient(x),
        omega.hull(),
        &start,
        opts,
        |it, x, v| trace.push(trace_row(it, x, v, x0)),
    );
    let xhat: Vec<f64> = if omega.is_finite() {
        out.x.iter().map(|&v| omega.nearest(v)).collect()
    } else {
        out.x.clone()
    };
    let objective = if xhat == out.x {
        out.value
    } else {
        obj.value(&xhat)
    };
    Ok(EstimateResult {
        stats: overlaps(&xhat, x0).unwrap_or_default(),
        cos_with_ones: cos_with_ones(&xhat),
        xhat,
        trace,
        objective,
        relaxed_objective: out.value,
        converged: out.converged && out.value.is_finite(),
        iterations: out.iterations,
        estimator_id,
        seed: obs.seed,
    })
}

/// Projected gradient ascent on the pseudo-likelihood objective; finite Ω is
/// relaxed to its hull and rounded at the end.
pub fn pmle_gradient_ascent(
    pair: &LikelihoodPair,
    obs: &ObservationMatrix,
    init: &Init,
    opts: &AscentOptions,
) -> Result<EstimateResult> {
    ascend(
        &pair.pseudo,
        &pair.omega,
        obs,
        None,
        init,
        opts,
        EstimatorId::Pmle,
    )
}

/// Ascent with the true likelihood in place of the pseudo-likelihood.
pub fn mle_gradient_ascent(
    pair: &LikelihoodPair,
    obs: &ObservationMatrix,
    init: &Init,
    opts: &AscentOptions,
) -> Result<EstimateResult> {
    ascend(
        &pair.truth,
        &pair.omega,
        obs,
        None,
        init,
        opts,
        EstimatorId::Mle,
    )
}

/// `α = β₂(E_ℚx⁰)²`, which restores the signal's mean contribution.
pub fn default_alpha(ip: &InfoParams, signal_mean: f64) -> f64 {
    ip.beta2 * signal_mean * signal_mean
}

/// Ascent on the objective with the empirical mean score removed and the
/// ridge `αNx̄²` put back.
pub fn pmle_score_corrected(
    pair: &LikelihoodPair,
    obs: &ObservationMatrix,
    alpha: f64,
    init: &Init,
    opts: &AscentOptions,
) -> Result<EstimateResult> {
    let correction = Correction {
        beta4_hat: score_estimator_beta4(&obs.entries, &pair.pseudo),
        alpha,
    };
    ascend(
        &pair.pseudo,
        &pair.omega,
        obs,
        Some(correction),
        init,
        opts,
        EstimatorId::PmleCorrected,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum LsDomain {
    AllSpace,
    Bounded(ParameterSpace),
}

/// The Gaussian pseudo-likelihood `−½(y − λw)²`.
pub fn ls_likelihood(lambda: f64) -> Likelihood {
    Likelihood::Gaussian {
        slope: lambda,
        offset: 0.0,
        variance: 1.0,
    }
}

/// Best rank-one approximation `argmax −½‖Y − λxxᵀ/√N‖²`. Over ℝᴺ this is
/// the top eigenvector of `Y` (with the mean replaced by `α/(λ√N)` when
/// corrected) at radius `√(Nθ/λ)`; bounded Ω uses projected ascent.
pub fn least_squares_spectral(
    obs: &ObservationMatrix,
    lambda: f64,
    domain: &LsDomain,
    corrected: bool,
    alpha: f64,
    init: &Init,
    opts: &AscentOptions,
) -> Result<EstimateResult> {
    let lik = ls_likelihood(lambda);
    if let LsDomain::Bounded(omega) = domain {
        let correction = corrected.then(|| Correction {
            beta4_hat: score_estimator_beta4(&obs.entries, &lik),
            alpha,
        });
        let id = if corrected {
            EstimatorId::LsCorrected
        } else {
            EstimatorId::Ls
        };
        return ascend(&lik, omega, obs, correction, init, opts, id);
    }

    let y = &obs.entries;
    let n = y.n();
    let rn = (n as f64).sqrt();
    let shift = if corrected {
        alpha / (lambda * rn) - y.mean()
    } else {
        0.0
    };
    let apply = |v: &[f64], out: &mut [f64]| {
        y.matvec(v, out);
        if shift != 0.0 {
            let s = shift * v.iter().sum::<f64>();
            out.iter_mut().for_each(|o| *o += s);
        }
    };
    let mut lanczos = LanczosOptions::default();
    let mut ep = top_eigenpair(n, apply, &lanczos);
    if !ep.converged {
        lanczos.max_steps *= 2;
        ep = top_eigenpair(n, apply, &lanczos);
        if !ep.converged {
            return Err(Error::EigenNonConvergence {
                residual: ep.residual,
            });
        }
    }
    let theta = ep.value / rn;
    let r = ls_radius_sq(theta, lambda, n).sqrt();
    let sign = if ep.vector.iter().sum::<f64>() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let xhat: Vec<f64> = ep.vector.iter().map(|u| sign * r * u).collect();

    // λxᵀỸx/√N − λ²‖x‖⁴/(2N)
    let mut yx = vec![0.0; n];
    apply(&xhat, &mut yx);
    let sq = dot(&xhat, &xhat);
    let objective = lambda * dot(&xhat, &yx) / rn - lambda * lambda * sq * sq / (2.0 * n as f64);
    let row = trace_row(0, &xhat, objective, &obs.signal);
    Ok(EstimateResult {
        stats: row.stats,
        cos_with_ones: row.cos_with_ones,
        xhat,
        trace: vec![row],
        objective,
        relaxed_objective: objective,
        converged: true,
        iterations: ep.iterations,
        estimator_id: if corrected {
            EstimatorId::LsSpectralCorrected
        } else {
            EstimatorId::LsSpectral
        },
        seed: obs.seed,
    })
}

/// Collapse point predicted for ill-scored tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IllScoredPrediction {
    /// `β₄ > 0`: the constant vector at the endpoint of largest modulus.
    Plus(f64),
    /// `β₄ < 0`: the constant vector at the point of conv(Ω) closest to 0.
    Minus(f64),
    WellScored,
}

pub fn ill_scored_prediction(
    ip: &InfoParams,
    omega: &ParameterSpace,
    tol: f64,
) -> IllScoredPrediction {
    let (lo, hi) = omega.hull();
    if ip.beta4 > tol {
        IllScoredPrediction::Plus(if hi.abs() >= lo.abs() { hi } else { lo })
    } else if ip.beta4 < -tol {
        IllScoredPrediction::Minus(0.0f64.clamp(lo, hi))
    } else {
        IllScoredPrediction::WellScored
    }
}

/// Writes the trace as CSV with columns `iter, objective, S, M, v, cos, cos_with_ones`.
pub fn write_trace_csv(result: &EstimateResult, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "objective", "S", "M", "v", "cos", "cos_with_ones"])?;
    for r in &result.trace {
        w.write_record(&[
            r.iter.to_string(),
            r.objective.to_string(),
            r.stats.s.to_string(),
            r.stats.m.to_string(),
            r.stats.v.to_string(),
            r.stats.cos.to_string(),
            r.cos_with_ones.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
