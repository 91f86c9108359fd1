//! Variational formulas for the constrained maximum of the Gaussian
//! equivalent: effective domain, the finite-temperature Parisi functional
//! through the Ruelle-cascade recursion for atomic order parameters, and its
//! zero-temperature limit by an inverse-temperature schedule.
//!
//! Conventions: at inverse temperature `L` the per-level fields `z_p` are
//! centered Gaussians with variance `β₁(Q_p − Q_{p−1})`, the multiplier `λ`
//! couples to `x·x⁰` and `μ` to `x²`, and
//!
//! ```text
//! φ_L = (1/L) E_ℚ X₀(x⁰) − (Lβ₁/2) Σ_p ζ_p (Q_{p+1}² − Q_p²)/2
//!       − μS − λM − ρv + β₂M²/2 − β₃S²/4 + αv²/2
//! ```
//!
//! with the prior on Ω normalized, so `φ_L` increases to `ψ` as `L → ∞`.

use rand::Rng as _;
use rayon::prelude::*;

use crate::datagen::SignalLaw;
use crate::error::{invalid, Error, Result};
use crate::estimators::{ill_scored_prediction, IllScoredPrediction};
use crate::info_params::{InfoParams, DEFAULT_CLASSIFY_TOL};
use crate::likelihoods::ParameterSpace;
use crate::optimize::{bfgs, BfgsOptions};
use crate::quadrature::{GaussHermite, GaussLegendre};
use crate::rng::stream_rng;
use crate::special::{LogSumExp, LN_SQRT_2PI};

/// Slack allowed when comparing support-function bounds.
const DOMAIN_SLACK: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Effective domain

/// Achievable overlaps `(S, M[, v])` for vectors in Ωᴺ against a signal with
/// empirical law ℚ.
#[derive(Clone, Debug)]
pub struct DomainC {
    pub omega: ParameterSpace,
    pub law: SignalLaw,
    /// Include the mean overlap `v`.
    pub with_mean: bool,
    /// Grid step for the dual directions on `[−1, 1]^d`.
    pub step: f64,
}

impl DomainC {
    pub fn new(omega: ParameterSpace, law: SignalLaw, with_mean: bool) -> Self {
        Self {
            omega,
            law,
            with_mean,
            step: 0.02,
        }
    }

    /// `sup_{x∈Ω} (a x² + b x)`.
    fn sup_quadratic(&self, a: f64, b: f64) -> f64 {
        let f = |x: f64| a * x * x + b * x;
        match self.omega.points() {
            Some(p) => p.iter().map(|&x| f(x)).fold(f64::NEG_INFINITY, f64::max),
            None => {
                let (lo, hi) = self.omega.hull();
                let mut best = f(lo).max(f(hi));
                if a < 0.0 {
                    let vertex = -b / (2.0 * a);
                    if lo < vertex && vertex < hi {
                        best = best.max(f(vertex));
                    }
                }
                best
            }
        }
    }

    /// `E_ℚ sup_x (ρx² + τx x⁰ + ηx)`.
    fn support(&self, rho: f64, tau: f64, eta: f64) -> f64 {
        self.law
            .atoms
            .iter()
            .zip(&self.law.weights)
            .map(|(&x0, &w)| w * self.sup_quadratic(rho, tau * x0 + eta))
            .sum()
    }

    pub fn contains(&self, s: f64, m: f64, v: Option<f64>) -> bool {
        if self.with_mean != v.is_some() {
            return false;
        }
        let steps = (2.0 / self.step).round() as i64;
        let coord = |k: i64| -1.0 + 2.0 * k as f64 / steps as f64;
        let etas: Vec<f64> = if self.with_mean {
            (0..=steps).map(coord).collect()
        } else {
            vec![0.0]
        };
        let v = v.unwrap_or(0.0);
        (0..=steps).into_par_iter().all(|i| {
            let rho = coord(i);
            (0..=steps).all(|j| {
                let tau = coord(j);
                etas.iter().all(|&eta| {
                    let pairing = rho * s + tau * m + eta * v;
                    pairing <= self.support(rho, tau, eta) + DOMAIN_SLACK
                        && -pairing <= self.support(-rho, -tau, -eta) + DOMAIN_SLACK
                })
            })
        })
    }
}

pub fn in_domain(dom: &DomainC, s: f64, m: f64, v: Option<f64>) -> bool {
    dom.contains(s, m, v)
}

// ---------------------------------------------------------------------------
// Ansatz and recursion

/// `k`-level atomic order parameter with multipliers at inverse temperature `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParisiAnsatz {
    /// `0 < ζ₀ < … < ζ_{k−1} < 1`.
    pub zetas: Vec<f64>,
    /// `0 = Q₀ ≤ … ≤ Q_k = S`.
    pub qs: Vec<f64>,
    pub lambda: f64,
    pub mu: f64,
    pub rho: Option<f64>,
    pub inverse_temperature: f64,
}

impl ParisiAnsatz {
    pub fn k(&self) -> usize {
        self.zetas.len()
    }

    pub fn self_overlap(&self) -> f64 {
        *self.qs.last().expect("validated ansatz")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidAnsatz("need at least one level".into()));
        }
        if self.qs.len() != k + 1 {
            return Err(Error::InvalidAnsatz(format!(
                "{} levels need {} overlaps, got {}",
                k,
                k + 1,
                self.qs.len()
            )));
        }
        if self.zetas[0] <= 0.0
            || self.zetas[k - 1] >= 1.0
            || self.zetas.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidAnsatz(format!(
                "ζ must increase strictly inside (0, 1): {:?}",
                self.zetas
            )));
        }
        if self.qs[0] != 0.0 || self.qs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidAnsatz(format!(
                "Q must increase from 0: {:?}",
                self.qs
            )));
        }
        if !(self.inverse_temperature > 0.0) {
            return Err(Error::InvalidAnsatz(
                "inverse temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `∫₀^S t ζ([0, t]) dt` for the atomic ζ.
    pub fn zeta_integral(&self) -> f64 {
        self.zetas
            .iter()
            .enumerate()
            .map(|(p, z)| z * (self.qs[p + 1].powi(2) - self.qs[p].powi(2)) / 2.0)
            .sum()
    }
}

/// Normalized prior on Ω: uniform on finite sets, a trapezoid grid on intervals.
#[derive(Clone, Debug)]
pub struct Prior {
    pub points: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl Prior {
    pub fn new(omega: &ParameterSpace, interval_nodes: usize) -> Self {
        match omega.points() {
            Some(p) => {
                let lw = -(p.len() as f64).ln();
                Self {
                    points: p.to_vec(),
                    log_weights: vec![lw; p.len()],
                }
            }
            None => {
                let (lo, hi) = omega.hull();
                let m = interval_nodes.max(2);
                let points: Vec<f64> = (0..m)
                    .map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64)
                    .collect();
                let raw: Vec<f64> = (0..m)
                    .map(|i| if i == 0 || i == m - 1 { 0.5 } else { 1.0 })
                    .collect();
                let total: f64 = raw.iter().sum();
                Self {
                    points,
                    log_weights: raw.iter().map(|w| (w / total).ln()).collect(),
                }
            }
        }
    }

    /// `log |Ω|` for the counting-measure bracket.
    pub fn log_size(&self) -> f64 {
        (self.points.len() as f64).ln()
    }
}

/// Integration rules for the recursion: Gauss–Hermite for the smooth outer
/// levels and Gauss–Legendre panels for the innermost level when the prior is
/// a small finite set. The innermost integrand `exp(ζ X_r)` has kinks of width
/// `1/(L·sd)` where the dominant point of Ω changes, which a Hermite rule does
/// not resolve at large `L`.
#[derive(Clone, Debug)]
pub struct Rules {
    pub hermite: GaussHermite,
    pub legendre: GaussLegendre,
}

impl Rules {
    /// `nodes` Hermite points per level; panel rules scale proportionally.
    pub fn new(nodes: usize) -> Self {
        let panel = (8 * nodes).div_ceil(61).max(4);
        Self {
            hermite: GaussHermite::new(nodes),
            legendre: GaussLegendre::new(panel),
        }
    }
}

/// Prior sizes up to which the innermost level uses kink-aligned panels.
const PANEL_PRIOR_LIMIT: usize = 16;

struct Recursion<'a> {
    ansatz: &'a ParisiAnsatz,
    rules: &'a Rules,
    /// Standard deviation of `z_{p+1}`.
    sds: Vec<f64>,
    points: &'a [f64],
    /// `log w_i + L(μx_i² + λx_i x⁰ + ρx_i)`.
    offsets: Vec<f64>,
    /// Fields where the maximizing point of the terminal changes.
    kinks: Vec<f64>,
    /// Deepest level with nonzero diffusion, if it gets panel treatment.
    innermost: Option<usize>,
}

impl Recursion<'_> {
    fn terminal(&self, h: f64) -> f64 {
        let l = self.ansatz.inverse_temperature;
        let mut acc = LogSumExp::default();
        for (&x, &c) in self.points.iter().zip(&self.offsets) {
            acc.push(c + l * h * x);
        }
        acc.value()
    }

    fn level(&self, p: usize, h: f64) -> f64 {
        if p == self.ansatz.k() {
            return self.terminal(h);
        }
        let sd = self.sds[p];
        if sd == 0.0 {
            return self.level(p + 1, h);
        }
        let zeta = self.ansatz.zetas[p];
        let (values, log_weights): (Vec<f64>, Vec<f64>) = if self.innermost == Some(p) {
            self.panel_nodes(h, sd, zeta)
                .into_iter()
                .map(|(z, lw)| (self.level(p + 1, h + sd * z), lw))
                .unzip()
        } else {
            let gh = &self.rules.hermite;
            (
                gh.nodes
                    .iter()
                    .map(|&z| self.level(p + 1, h + sd * z))
                    .collect(),
                gh.log_weights.clone(),
            )
        };
        let weights: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();
        let total: f64 = weights.iter().sum();
        let mean: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / total;
        let spread = values.iter().fold(0.0f64, |a, v| a.max((v - mean).abs()));
        if zeta * spread < 1e-5 {
            // (1/ζ) log E e^{ζX} = EX + ζ Var X/2 + O(ζ²); the log-sum-exp
            // form loses all precision once ζX is below rounding level
            let var: f64 = values
                .iter()
                .zip(&weights)
                .map(|(v, w)| w * (v - mean).powi(2))
                .sum::<f64>()
                / total;
            return mean + zeta * var / 2.0;
        }
        let mut acc = LogSumExp::default();
        for (v, lw) in values.iter().zip(&log_weights) {
            acc.push(lw + zeta * v);
        }
        acc.value() / zeta
    }

    /// Nodes `z` and log-weights (standard normal density included) covering
    /// the mass of `φ(z) e^{ζX_r(h + sd·z)}`, with panel edges at the kinks
    /// and geometrically graded panels around them.
    fn panel_nodes(&self, h: f64, sd: f64, zeta: f64) -> Vec<(f64, f64)> {
        const REACH: f64 = 8.5;
        const MAX_PANEL: f64 = 2.0;
        let l = self.ansatz.inverse_temperature;
        let tilt = zeta * l * sd;
        let lo = tilt * self.points[0].min(0.0) - REACH;
        let hi = tilt * self.points[self.points.len() - 1].max(0.0) + REACH;
        let mut edges = vec![lo, hi];
        let layer = 0.5 / (l * sd);
        for &u in &self.kinks {
            let z = (u - h) / sd;
            if !(lo < z && z < hi) {
                continue;
            }
            edges.push(z);
            let mut d = layer;
            while d < MAX_PANEL {
                edges.extend([z - d, z + d].into_iter().filter(|e| lo < *e && *e < hi));
                d *= 2.0;
            }
        }
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let mut nodes = Vec::new();
        for w in edges.windows(2) {
            let pieces = ((w[1] - w[0]) / MAX_PANEL).ceil().max(1.0) as usize;
            let step = (w[1] - w[0]) / pieces as f64;
            for j in 0..pieces {
                let a = w[0] + j as f64 * step;
                for (z, weight) in self.rules.legendre.on(a, a + step) {
                    nodes.push((z, weight.ln() - z * z / 2.0 - LN_SQRT_2PI));
                }
            }
        }
        nodes
    }
}

/// Breakpoints of `max_i (c_i + L·u·x_i)` in `u`.
fn envelope_kinks(points: &[f64], offsets: &[f64], l: f64) -> Vec<f64> {
    let m = points.len();
    let line = |i: usize, u: f64| offsets[i] + l * u * points[i];
    let mut kinks = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if points[i] == points[j] {
                continue;
            }
            let u = (offsets[j] - offsets[i]) / (l * (points[i] - points[j]));
            let top = (0..m).map(|r| line(r, u)).fold(f64::NEG_INFINITY, f64::max);
            if line(i, u) >= top - 1e-9 * top.abs().max(1.0) {
                kinks.push(u);
            }
        }
    }
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    kinks
}

/// `X₀(x⁰)`: the terminal `log ∫ exp(L(hx + μx² + λx x⁰ + ρx)) dP(x)` pushed
/// down the levels by `X_p = (1/ζ_p) log E exp(ζ_p X_{p+1})`.
pub fn rpc_recursion(
    ansatz: &ParisiAnsatz,
    prior: &Prior,
    beta1: f64,
    x0: f64,
    rules: &Rules,
) -> Result<f64> {
    ansatz.validate()?;
    if beta1 < 0.0 {
        return Err(invalid("beta1", "must be nonnegative"));
    }
    Ok(rpc_unchecked(ansatz, prior, beta1, x0, rules))
}

fn rpc_unchecked(ansatz: &ParisiAnsatz, prior: &Prior, beta1: f64, x0: f64, rules: &Rules) -> f64 {
    let l = ansatz.inverse_temperature;
    let rho = ansatz.rho.unwrap_or(0.0);
    let offsets: Vec<f64> = prior
        .points
        .iter()
        .zip(&prior.log_weights)
        .map(|(&x, &lw)| lw + l * (ansatz.mu * x * x + ansatz.lambda * x * x0 + rho * x))
        .collect();
    let sds: Vec<f64> = ansatz
        .qs
        .windows(2)
        .map(|w| (beta1 * (w[1] - w[0])).max(0.0).sqrt())
        .collect();
    let panels = prior.points.len() > 1 && prior.points.len() <= PANEL_PRIOR_LIMIT;
    let innermost = if panels {
        sds.iter().rposition(|&s| s > 0.0)
    } else {
        None
    };
    let kinks = if innermost.is_some() {
        envelope_kinks(&prior.points, &offsets, l)
    } else {
        Vec::new()
    };
    Recursion {
        ansatz,
        rules,
        sds,
        points: &prior.points,
        offsets,
        kinks,
        innermost,
    }
    .level(0, 0.0)
}

/// Parameters of a variational problem.
#[derive(Clone, Debug)]
pub struct ParisiProblem {
    pub ip: InfoParams,
    /// Ridge of the score-corrected objective; `Some` adds the mean overlap `v`.
    pub alpha: Option<f64>,
    pub omega: ParameterSpace,
    pub law: SignalLaw,
}

impl ParisiProblem {
    pub fn new(ip: InfoParams, omega: ParameterSpace, law: SignalLaw) -> Self {
        Self {
            ip,
            alpha: None,
            omega,
            law,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn domain(&self, with_mean: bool) -> DomainC {
        DomainC::new(self.omega.clone(), self.law.clone(), with_mean)
    }

    fn deterministic(&self, s: f64, m: f64, v: Option<f64>) -> f64 {
        let ridge = match (v, self.alpha) {
            (Some(v), Some(a)) => a * v * v / 2.0,
            _ => 0.0,
        };
        self.ip.beta2 * m * m / 2.0 - self.ip.beta3 * s * s / 4.0 + ridge
    }
}

/// `φ_L` at `(S, M[, v])` for the given ansatz (its last overlap must be `S`).
pub fn phi_functional(
    problem: &ParisiProblem,
    s: f64,
    m: f64,
    v: Option<f64>,
    ansatz: &ParisiAnsatz,
    prior: &Prior,
    rules: &Rules,
) -> Result<f64> {
    ansatz.validate()?;
    if (ansatz.self_overlap() - s).abs() > 1e-12 {
        return Err(Error::InvalidAnsatz(format!(
            "Q_k = {} but S = {s}",
            ansatz.self_overlap()
        )));
    }
    if v.is_some() != ansatz.rho.is_some() {
        return Err(Error::InvalidAnsatz(
            "the mean multiplier is present iff v is constrained".into(),
        ));
    }
    if !problem.domain(v.is_some()).contains(s, m, v) {
        return Err(Error::DomainViolation { s, m });
    }
    Ok(phi_unchecked(problem, s, m, v, ansatz, prior, rules))
}

fn phi_unchecked(
    problem: &ParisiProblem,
    s: f64,
    m: f64,
    v: Option<f64>,
    ansatz: &ParisiAnsatz,
    prior: &Prior,
    rules: &Rules,
) -> f64 {
    let l = ansatz.inverse_temperature;
    let beta1 = problem.ip.beta1;
    let law = &problem.law;
    let mean_x0: f64 = law
        .atoms
        .iter()
        .zip(&law.weights)
        .map(|(&x0, &w)| w * rpc_unchecked(ansatz, prior, beta1, x0, rules))
        .sum();
    mean_x0 / l
        - l * beta1 / 2.0 * ansatz.zeta_integral()
        - ansatz.mu * s
        - ansatz.lambda * m
        - ansatz.rho.unwrap_or(0.0) * v.unwrap_or(0.0)
        + problem.deterministic(s, m, v)
}

// ---------------------------------------------------------------------------
// Minimization

#[derive(Clone, Debug)]
pub struct PsiOptions {
    pub k_max: usize,
    pub schedule: Vec<f64>,
    pub starts: usize,
    pub nodes: usize,
    pub interval_nodes: usize,
    /// Requested certificate width.
    pub tol: f64,
    pub seed: u64,
    pub bfgs: BfgsOptions,
}

impl Default for PsiOptions {
    fn default() -> Self {
        Self {
            k_max: 2,
            schedule: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            starts: 5,
            nodes: 61,
            interval_nodes: 101,
            tol: 0.1,
            seed: 0x5eed,
            bfgs: BfgsOptions {
                max_iter: 300,
                grad_tol: 1e-8,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    /// `φ` at the largest inverse temperature: a lower bound.
    pub lower: f64,
    /// `lower + log|Ω|/L`: an upper bound for the zero-temperature value.
    pub upper: f64,
    pub width: f64,
    /// Disagreement between first- and second-order extrapolation.
    pub extrapolation_error: f64,
    /// Change of the final `φ` when the Gauss–Hermite nodes are doubled.
    pub node_delta: f64,
    /// The minimized `φ_L` is non-decreasing along the schedule.
    pub monotone: bool,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PsiResult {
    pub psi: f64,
    pub ansatz: ParisiAnsatz,
    pub certificate: Certificate,
    /// `(L, min φ_L)` along the schedule.
    pub levels: Vec<(f64, f64)>,
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Largest Gaussian tilt `ζ·L·sd·max|x|` a rule with `nodes` points
/// integrates to ~1e-9 relative accuracy (8 for 61 nodes).
fn tilt_limit(nodes: usize) -> f64 {
    8.0 * (nodes as f64 / 61.0).sqrt()
}

/// Unconstrained coordinates: multipliers, then ζ logits, then Q logits.
/// Each ζ_p is capped so that the tilt of level `p` stays within the range
/// the quadrature resolves; beyond it the rule underestimates `E e^{ζX}` and
/// the minimizer would chase the error.
struct Coords {
    k: usize,
    free_mu: bool,
    with_rho: bool,
    s: f64,
    l: f64,
    beta1: f64,
    /// `tilt_limit / (L·max|x|)`.
    tilt_cap: f64,
}

impl Coords {
    fn dim(&self) -> usize {
        1 + usize::from(self.free_mu) + usize::from(self.with_rho) + self.k + (self.k - 1)
    }

    fn caps(&self, qs: &[f64]) -> Vec<f64> {
        qs.windows(2)
            .map(|w| {
                let sd = (self.beta1 * (w[1] - w[0])).max(0.0).sqrt();
                if sd > 0.0 {
                    (self.tilt_cap / sd).min(1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn decode(&self, theta: &[f64]) -> ParisiAnsatz {
        let mut it = theta.iter().copied();
        let lambda = it.next().unwrap();
        let mu = if self.free_mu {
            it.next().unwrap()
        } else {
            0.0
        };
        let rho = self.with_rho.then(|| it.next().unwrap());
        let zu: Vec<f64> = (0..self.k).map(|_| it.next().unwrap()).collect();
        let qu: Vec<f64> = (0..self.k - 1).map(|_| it.next().unwrap()).collect();
        let mut qs = vec![0.0; self.k + 1];
        qs[self.k] = self.s;
        for p in (1..self.k).rev() {
            qs[p] = qs[p + 1] * logistic(qu[p - 1]);
        }
        let caps = self.caps(&qs);
        let mut zetas = vec![0.0; self.k];
        zetas[self.k - 1] = caps[self.k - 1] * logistic(zu[self.k - 1]);
        for p in (0..self.k - 1).rev() {
            zetas[p] = zetas[p + 1].min(caps[p]) * logistic(zu[p]);
        }
        ParisiAnsatz {
            zetas,
            qs,
            lambda,
            mu,
            rho,
            inverse_temperature: self.l,
        }
    }

    fn encode(&self, a: &ParisiAnsatz) -> Vec<f64> {
        let clamp = |p: f64| p.clamp(1e-12, 1.0 - 1e-12);
        let mut theta = vec![a.lambda];
        if self.free_mu {
            theta.push(a.mu);
        }
        if self.with_rho {
            theta.push(a.rho.unwrap_or(0.0));
        }
        let caps = self.caps(&a.qs);
        for p in 0..self.k {
            let ceiling = if p + 1 < self.k {
                a.zetas[p + 1].min(caps[p])
            } else {
                caps[p]
            };
            theta.push(logit(clamp(a.zetas[p] / ceiling)));
        }
        for p in 1..self.k {
            let ratio = if a.qs[p + 1] > 0.0 {
                a.qs[p] / a.qs[p + 1]
            } else {
                0.5
            };
            theta.push(logit(clamp(ratio)));
        }
        theta
    }
}

/// Embeds a `k`-level ansatz into `k + 1` levels without changing `φ`: the
/// new top level has the same ζ as the old one (up to 1e-9) and zero width.
fn refine(a: &ParisiAnsatz) -> ParisiAnsatz {
    let mut zetas = a.zetas.clone();
    let top = *zetas.last().unwrap();
    zetas.push((top * (1.0 + 1e-9)).min(1.0 - 1e-12));
    let mut qs = a.qs.clone();
    qs.push(a.self_overlap());
    // shift the old top boundary inward so the new level is nearly empty
    let k = qs.len() - 1;
    qs[k - 1] = qs[k] * (1.0 - 1e-9);
    ParisiAnsatz {
        zetas,
        qs,
        ..a.clone()
    }
}

/// Rescales the ζ of an ansatz found at inverse temperature `from` for use at `to`.
fn retemper(a: &ParisiAnsatz, to: f64) -> ParisiAnsatz {
    let ratio = a.inverse_temperature / to;
    let zetas: Vec<f64> = a
        .zetas
        .iter()
        .map(|z| (z * ratio).clamp(1e-9, 1.0 - 1e-9))
        .collect();
    ParisiAnsatz {
        zetas,
        inverse_temperature: to,
        ..a.clone()
    }
}

fn random_start(
    k: usize,
    s: f64,
    l: f64,
    free_mu: bool,
    with_rho: bool,
    rng: &mut crate::rng::Rng,
) -> ParisiAnsatz {
    let mut zetas: Vec<f64> = (0..k)
        .map(|_| rng.random_range(0.05..0.95) * (4.0 / l).min(1.0))
        .collect();
    zetas.sort_by(f64::total_cmp);
    for p in 1..k {
        if zetas[p] <= zetas[p - 1] {
            zetas[p] = zetas[p - 1] * 1.01;
        }
    }
    let mut qs: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.0..1.0) * s).collect();
    qs.sort_by(f64::total_cmp);
    qs.insert(0, 0.0);
    qs.push(s);
    ParisiAnsatz {
        zetas: zetas.into_iter().map(|z| z.min(0.999)).collect(),
        qs,
        lambda: rng.random_range(-10.0..10.0),
        mu: if free_mu {
            rng.random_range(-10.0..10.0)
        } else {
            0.0
        },
        rho: with_rho.then(|| rng.random_range(-10.0..10.0)),
        inverse_temperature: l,
    }
}

fn default_start(k: usize, s: f64, l: f64, with_rho: bool) -> ParisiAnsatz {
    let zmax = (2.0 / l).min(0.5);
    ParisiAnsatz {
        zetas: (0..k).map(|p| zmax * (p + 1) as f64 / k as f64).collect(),
        qs: (0..=k).map(|p| s * p as f64 / k as f64).collect(),
        lambda: 0.0,
        mu: 0.0,
        rho: with_rho.then_some(0.0),
        inverse_temperature: l,
    }
}

struct Stage<'a> {
    problem: &'a ParisiProblem,
    prior: &'a Prior,
    rules: &'a Rules,
    s: f64,
    m: f64,
    v: Option<f64>,
    free_mu: bool,
}

impl Stage<'_> {
    fn minimize(
        &self,
        k: usize,
        l: f64,
        starts: &[ParisiAnsatz],
        opts: &BfgsOptions,
    ) -> (f64, ParisiAnsatz) {
        let coords = Coords {
            k,
            free_mu: self.free_mu,
            with_rho: self.v.is_some(),
            s: self.s,
            l,
            beta1: self.problem.ip.beta1,
            tilt_cap: tilt_limit(self.rules.hermite.len())
                / (l * self.problem.omega.bound().max(1e-300)),
        };
        debug_assert!(starts
            .iter()
            .all(|a| coords.encode(a).len() == coords.dim()));
        let objective = |theta: &[f64]| {
            let a = coords.decode(theta);
            phi_unchecked(
                self.problem,
                self.s,
                self.m,
                self.v,
                &a,
                self.prior,
                self.rules,
            )
        };
        starts
            .par_iter()
            .map(|a| {
                let theta0 = coords.encode(a);
                let start_value = objective(&theta0);
                let found = bfgs(objective, &theta0, opts);
                if found.value.is_finite() && found.value <= start_value {
                    (found.value, coords.decode(&found.x))
                } else {
                    (start_value, coords.decode(&theta0))
                }
            })
            .filter(|(v, _)| v.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap_or((f64::INFINITY, starts[0].clone()))
    }
}

/// Zero-temperature value `ψ(S, M[, v])` with its certificate.
pub fn minimize_psi(
    problem: &ParisiProblem,
    s: f64,
    m: f64,
    v: Option<f64>,
    opts: &PsiOptions,
) -> Result<PsiResult> {
    if !problem.domain(v.is_some()).contains(s, m, v) {
        return Err(Error::DomainViolation { s, m });
    }
    if opts.schedule.is_empty() || opts.k_max == 0 {
        return Err(invalid(
            "schedule",
            "need at least one temperature and one level",
        ));
    }
    let with_rho = v.is_some();
    let l_max = *opts.schedule.last().unwrap();
    if problem.ip.beta1 == 0.0 {
        let psi = problem.deterministic(s, m, v);
        let ansatz = ParisiAnsatz {
            zetas: vec![0.5],
            qs: vec![0.0, s],
            lambda: 0.0,
            mu: 0.0,
            rho: with_rho.then_some(0.0),
            inverse_temperature: f64::INFINITY,
        };
        let certificate = Certificate {
            lower: psi,
            upper: psi,
            width: 0.0,
            extrapolation_error: 0.0,
            node_delta: 0.0,
            monotone: true,
            converged: true,
        };
        return Ok(PsiResult {
            psi,
            ansatz,
            certificate,
            levels: vec![(f64::INFINITY, psi)],
        });
    }

    let prior = Prior::new(&problem.omega, opts.interval_nodes);
    let rules = Rules::new(opts.nodes);
    let stage = Stage {
        problem,
        prior: &prior,
        rules: &rules,
        s,
        m,
        v,
        free_mu: problem.omega.constant_norm().is_none(),
    };
    let mut rng = stream_rng(opts.seed, 0);
    let mut levels = Vec::with_capacity(opts.schedule.len());
    let mut previous: Vec<ParisiAnsatz> = Vec::new();
    let mut best_final = None;
    for &l in &opts.schedule {
        let mut best: Option<(f64, ParisiAnsatz)> = None;
        for k in 1..=opts.k_max {
            let mut starts: Vec<ParisiAnsatz> = previous
                .iter()
                .filter(|a| a.k() == k)
                .map(|a| retemper(a, l))
                .collect();
            if let Some((_, lower)) = best.as_ref().filter(|(_, a)| a.k() + 1 == k) {
                starts.push(refine(lower));
            }
            starts.push(default_start(k, s, l, with_rho));
            while starts.len() < opts.starts.max(1) + usize::from(k > 1) {
                starts.push(random_start(k, s, l, stage.free_mu, with_rho, &mut rng));
            }
            let found = stage.minimize(k, l, &starts, &opts.bfgs);
            if best.as_ref().is_none_or(|(v, _)| found.0 <= *v) {
                best = Some(found.clone());
            }
            previous.retain(|a| a.k() != k);
            previous.push(found.1);
        }
        let (value, ansatz) = best.expect("k_max >= 1");
        levels.push((l, value));
        best_final = Some(ansatz);
    }
    let ansatz = best_final.expect("nonempty schedule");
    let last = levels.last().unwrap().1;

    let fine = Rules::new(2 * opts.nodes);
    let node_delta = (phi_unchecked(problem, s, m, v, &ansatz, &prior, &fine) - last).abs();
    let monotone = levels.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9);

    let lower = last;
    let upper = last + prior.log_size() / l_max;
    let (estimate, extrapolation_error) = extrapolate(&levels, problem.omega.is_finite());
    let psi = estimate.clamp(lower, upper);
    let width = upper - lower;
    let certificate = Certificate {
        lower,
        upper,
        width,
        extrapolation_error,
        node_delta,
        monotone,
        converged: width <= opts.tol && monotone && node_delta < 1e-6_f64.max(opts.tol * 1e-3),
    };
    Ok(PsiResult {
        psi,
        ansatz,
        certificate,
        levels,
    })
}

/// Zero-temperature extrapolation of `min φ_L`. Finite Ω: Richardson in
/// `1/L` on the last three temperatures. Intervals: least squares fit of
/// `ψ + a/L + b·ln(L)/L`.
fn extrapolate(levels: &[(f64, f64)], finite: bool) -> (f64, f64) {
    let n = levels.len();
    if n == 1 {
        return (levels[0].1, f64::INFINITY);
    }
    if n == 2 {
        let r1 = richardson(levels[0], levels[1]);
        return (r1, (r1 - levels[1].1).abs());
    }
    let (a, b, c) = (levels[n - 3], levels[n - 2], levels[n - 1]);
    let r1 = richardson(b, c);
    if finite {
        let r0 = richardson(a, b);
        // R_ab = ψ − b·h_a·h_b, so this combination removes the 1/L² term
        let ratio = b.0 / a.0 * (c.0 / b.0);
        let r2 = (ratio * r1 - r0) / (ratio - 1.0);
        (r2, (r2 - r1).abs())
    } else {
        let fit = fit_log(levels);
        (fit, (fit - r1).abs())
    }
}

/// First-order Richardson in `h = 1/L`.
fn richardson((l1, f1): (f64, f64), (l2, f2): (f64, f64)) -> f64 {
    let (h1, h2) = (1.0 / l1, 1.0 / l2);
    (h1 * f2 - h2 * f1) / (h1 - h2)
}

fn fit_log(levels: &[(f64, f64)]) -> f64 {
    use nalgebra::{DMatrix, DVector};
    let rows = levels.len();
    let a = DMatrix::from_fn(rows, 3, |i, j| {
        let l = levels[i].0;
        match j {
            0 => 1.0,
            1 => 1.0 / l,
            _ => l.ln() / l,
        }
    });
    let y = DVector::from_iterator(rows, levels.iter().map(|p| p.1));
    match a.clone().svd(true, true).solve(&y, 1e-12) {
        Ok(coef) => coef[0],
        Err(_) => levels[rows - 1].1,
    }
}

// ---------------------------------------------------------------------------
// Maximizer set

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub step: f64,
    /// Points within this distance of the grid maximum form the plateau.
    pub plateau_tol: f64,
    pub psi: PsiOptions,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            step: 0.02,
            plateau_tol: 1e-3,
            psi: PsiOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub s: f64,
    pub m: f64,
    pub v: Option<f64>,
    pub psi: f64,
    pub width: f64,
}

#[derive(Clone, Debug)]
pub struct MaximizerSet {
    pub grid: Vec<GridPoint>,
    pub plateau: Vec<GridPoint>,
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).round() as i64;
    if count <= 0 {
        return vec![lo];
    }
    (0..=count)
        .map(|i| lo + (hi - lo) * i as f64 / count as f64)
        .collect()
}

/// Grid approximation of the set of overlaps maximizing `ψ`, the predicted
/// limit set of `(S_N, M_N[, v_N])` for pseudo-likelihood maximizers.
pub fn maximizer_set(problem: &ParisiProblem, grid: &GridOptions) -> Result<MaximizerSet> {
    let corrected = problem.alpha.is_some();
    let prediction = ill_scored_prediction(&problem.ip, &problem.omega, DEFAULT_CLASSIFY_TOL);
    let mean_x0 = problem.law.mean();
    let bound = problem.omega.bound();
    let bound_x0 = problem.law.atoms.iter().fold(0.0f64, |a, x| a.max(x.abs()));

    let nodes: Vec<(f64, f64, Option<f64>)> = match (corrected, prediction) {
        (false, IllScoredPrediction::Plus(x)) => vec![(x * x, x * mean_x0, None)],
        _ => {
            let ss = match problem.omega.constant_norm() {
                Some(r) => vec![r * r],
                None => {
                    let (lo, hi) = problem.omega.hull();
                    let s_lo = if lo <= 0.0 && hi >= 0.0 {
                        0.0
                    } else {
                        lo.abs().min(hi.abs()).powi(2)
                    };
                    axis(s_lo, bound * bound, grid.step)
                }
            };
            let ms = axis(-bound * bound_x0, bound * bound_x0, grid.step);
            let vs: Vec<Option<f64>> = match (corrected, prediction) {
                (true, _) => axis(-bound, bound, grid.step)
                    .into_iter()
                    .map(Some)
                    .collect(),
                (false, IllScoredPrediction::Minus(x)) => vec![Some(x)],
                _ => vec![None],
            };
            let mut nodes = Vec::with_capacity(ss.len() * ms.len() * vs.len());
            for &s in &ss {
                for &m in &ms {
                    nodes.extend(vs.iter().map(|&v| (s, m, v)));
                }
            }
            nodes
        }
    };

    // ill-scored(−) uses the v-slice without the ridge
    let sliced;
    let target = if !corrected && matches!(prediction, IllScoredPrediction::Minus(_)) {
        sliced = ParisiProblem {
            alpha: None,
            ..problem.clone()
        };
        &sliced
    } else {
        problem
    };
    let points: Vec<GridPoint> = nodes
        .into_par_iter()
        .filter_map(|(s, m, v)| match minimize_psi(target, s, m, v, &grid.psi) {
            Ok(r) => Some(Ok(GridPoint {
                s,
                m,
                v,
                psi: r.psi,
                width: r.certificate.width,
            })),
            Err(Error::DomainViolation { .. }) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    let best = points
        .iter()
        .map(|p| p.psi)
        .fold(f64::NEG_INFINITY, f64::max);
    let plateau = points
        .iter()
        .filter(|p| p.psi >= best - grid.plateau_tol)
        .copied()
        .collect();
    Ok(MaximizerSet {
        grid: points,
        plateau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SignalEnsemble;

    fn delta_one() -> SignalLaw {
        SignalLaw::point(1.0)
    }

    fn sk_problem() -> ParisiProblem {
        ParisiProblem::new(
            InfoParams::from_betas(1.0, 0.0, 0.0, 0.0),
            ParameterSpace::pm_one(),
            SignalEnsemble::rademacher().law(),
        )
    }

    #[test]
    fn domain_examples() {
        let dom = DomainC::new(
            ParameterSpace::interval(-1.0, 1.0).unwrap(),
            delta_one(),
            false,
        );
        assert!(dom.contains(1.0, 1.0, None));
        assert!(!dom.contains(0.25, 0.6, None));
        assert!(dom.contains(0.5, 0.6, None));
        let cube = DomainC::new(
            ParameterSpace::pm_one(),
            SignalEnsemble::rademacher().law(),
            false,
        );
        assert!(cube.contains(1.0, 0.3, None));
        assert!(!cube.contains(0.9, 0.0, None));
        assert!(!cube.contains(1.1, 0.0, None));
        assert!(!cube.contains(1.0, 0.0, Some(0.0)));
    }

    #[test]
    fn zeta_integral_example() {
        let a = ParisiAnsatz {
            zetas: vec![0.5],
            qs: vec![0.0, 1.0],
            lambda: 0.0,
            mu: 0.0,
            rho: None,
            inverse_temperature: 1.0,
        };
        assert!((a.zeta_integral() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn invalid_ansatz_is_rejected() {
        let prior = Prior::new(&ParameterSpace::pm_one(), 11);
        let gh = Rules::new(11);
        let mut a = ParisiAnsatz {
            zetas: vec![0.0],
            qs: vec![0.0, 1.0],
            lambda: 0.0,
            mu: 0.0,
            rho: None,
            inverse_temperature: 1.0,
        };
        assert!(rpc_recursion(&a, &prior, 1.0, 1.0, &gh).is_err());
        a.zetas = vec![0.6, 0.4];
        a.qs = vec![0.0, 0.5, 1.0];
        assert!(rpc_recursion(&a, &prior, 1.0, 1.0, &gh).is_err());
    }

    #[test]
    fn zero_diffusion_reduces_to_terminal() {
        let omega = ParameterSpace::finite([-1.0, 0.0, 2.0]).unwrap();
        let prior = Prior::new(&omega, 0);
        let gh = Rules::new(61);
        let a = ParisiAnsatz {
            zetas: vec![0.3, 0.7],
            qs: vec![0.0, 0.4, 1.0],
            lambda: 0.7,
            mu: -0.2,
            rho: None,
            inverse_temperature: 3.0,
        };
        let got = rpc_recursion(&a, &prior, 0.0, 1.5, &gh).unwrap();
        let want = ([-1.0f64, 0.0, 2.0]
            .iter()
            .map(|&x| (3.0 * (-0.2 * x * x + 0.7 * x * 1.5)).exp())
            .sum::<f64>()
            / 3.0)
            .ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn unit_zeta_is_plain_gaussian_smoothing() {
        // Ising terminal log cosh(Lh): E log... with ζ = 1 gives log E cosh(Lz) = L²β₁S/2
        let prior = Prior::new(&ParameterSpace::pm_one(), 0);
        let gh = Rules::new(61);
        let a = ParisiAnsatz {
            zetas: vec![1.0 - 1e-12],
            qs: vec![0.0, 1.0],
            lambda: 0.0,
            mu: 0.0,
            rho: None,
            inverse_temperature: 0.5,
        };
        let x = rpc_recursion(&a, &prior, 1.0, 1.0, &gh).unwrap();
        assert!((x - 0.125).abs() < 1e-9, "{x}");
        // and the functional is then the annealed value Lβ₁/4
        let phi = phi_functional(&sk_problem(), 1.0, 0.0, None, &a, &prior, &gh).unwrap();
        assert!((phi - 0.125).abs() < 1e-9, "{phi}");
    }

    #[test]
    fn two_level_recursion_matches_nested_monte_carlo() {
        use rand_distr::{Distribution, StandardNormal};
        let omega = ParameterSpace::finite([-1.0, 0.5, 1.0]).unwrap();
        let prior = Prior::new(&omega, 0);
        let gh = Rules::new(61);
        let a = ParisiAnsatz {
            zetas: vec![0.3, 0.8],
            qs: vec![0.0, 0.4, 0.9],
            lambda: 0.2,
            mu: -0.1,
            rho: None,
            inverse_temperature: 1.0,
        };
        let beta1 = 0.5;
        let x0 = 1.0;
        let exact = rpc_recursion(&a, &prior, beta1, x0, &gh).unwrap();

        let terminal = |h: f64| {
            let terms: Vec<f64> = prior
                .points
                .iter()
                .zip(&prior.log_weights)
                .map(|(&x, &lw)| {
                    lw + a.inverse_temperature * (h * x + a.mu * x * x + a.lambda * x * x0)
                })
                .collect();
            crate::special::log_sum_exp(&terms)
        };
        let (sd1, sd2) = ((beta1 * 0.4f64).sqrt(), (beta1 * 0.5f64).sqrt());
        let mut rng = stream_rng(17, 0);
        let (outer, inner) = (1000, 1000);
        // outer samples of exp(ζ₀ X₁(z₁)), with X₁ estimated from an inner average
        let samples: Vec<f64> = (0..outer)
            .map(|_| {
                let z1: f64 =
                    sd1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                let mean: f64 = (0..inner)
                    .map(|_| {
                        let z2: f64 = StandardNormal.sample(&mut rng);
                        (a.zetas[1] * terminal(z1 + sd2 * z2)).exp()
                    })
                    .sum::<f64>()
                    / inner as f64;
                (a.zetas[0] / a.zetas[1] * mean.ln()).exp()
            })
            .collect();
        let m = samples.iter().sum::<f64>() / outer as f64;
        let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (outer - 1) as f64;
        let estimate = m.ln() / a.zetas[0];
        let se = var.sqrt() / (outer as f64).sqrt() / m / a.zetas[0];
        assert!(
            (estimate - exact).abs() < 3.0 * se + 1e-3,
            "{estimate} vs {exact} (se {se})"
        );
    }

    #[test]
    fn zero_beta1_closed_form_and_domain_violation() {
        let ip = InfoParams::from_betas(0.0, 1.3, 0.8, 0.0);
        let problem = ParisiProblem::new(
            ip,
            ParameterSpace::interval(-1.0, 1.0).unwrap(),
            delta_one(),
        );
        let r = minimize_psi(&problem, 0.6, 0.5, None, &PsiOptions::default()).unwrap();
        assert!((r.psi - (1.3 * 0.25 / 2.0 - 0.8 * 0.36 / 4.0)).abs() < 1e-12);
        assert!(matches!(
            minimize_psi(&problem, 0.2, 0.6, None, &PsiOptions::default()),
            Err(Error::DomainViolation { .. })
        ));
    }

    #[test]
    fn zero_beta1_maximizer_is_the_calculus_optimum() {
        let ip = InfoParams::from_betas(0.0, 1.0, 2.0, 0.0);
        let problem = ParisiProblem::new(
            ip,
            ParameterSpace::interval(-1.0, 1.0).unwrap(),
            delta_one(),
        );
        let grid = GridOptions {
            step: 0.05,
            ..Default::default()
        };
        let set = maximizer_set(&problem, &grid).unwrap();
        // ψ = M²/2 − S²/2 with M² ≤ S ≤ 1: S* = ½, |M| = √½
        let best = set
            .plateau
            .iter()
            .max_by(|a, b| a.psi.total_cmp(&b.psi))
            .unwrap();
        assert!(
            (best.s - 0.5).abs() < 0.06 && (best.m.abs() - 0.5f64.sqrt()).abs() < 0.06,
            "{best:?}"
        );
        assert!((best.psi - 0.125).abs() < 0.01);
    }

    #[test]
    fn ill_scored_plus_collapses() {
        let ip = InfoParams::from_betas(1.0, 1.0, 1.0, 0.5);
        let problem = ParisiProblem::new(
            ip,
            ParameterSpace::interval(-1.0, 2.0).unwrap(),
            delta_one(),
        );
        let set = maximizer_set(
            &problem,
            &GridOptions {
                psi: PsiOptions {
                    schedule: vec![4.0],
                    k_max: 1,
                    starts: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(set.plateau.len(), 1);
        assert_eq!((set.plateau[0].s, set.plateau[0].m), (4.0, 2.0));
    }

    #[test]
    fn psi_is_even_in_m_and_sandwiched() {
        let problem = sk_problem();
        let opts = PsiOptions {
            schedule: vec![4.0, 8.0, 16.0],
            starts: 2,
            ..Default::default()
        };
        let a = minimize_psi(&problem, 1.0, 0.3, None, &opts).unwrap();
        let b = minimize_psi(&problem, 1.0, -0.3, None, &opts).unwrap();
        assert!((a.psi - b.psi).abs() < 1e-5, "{} {}", a.psi, b.psi);
        assert!(a.certificate.monotone);
        for &(l, phi) in &a.levels {
            assert!(
                phi <= a.psi + 1e-9 && a.psi <= phi + 2f64.ln() / l + 1e-9,
                "L={l}: {phi} vs {}",
                a.psi
            );
        }
    }

    #[test]
    fn more_levels_never_increase_phi() {
        let problem = sk_problem();
        let one = PsiOptions {
            schedule: vec![8.0],
            k_max: 1,
            starts: 2,
            ..Default::default()
        };
        let two = PsiOptions {
            k_max: 2,
            ..one.clone()
        };
        let a = minimize_psi(&problem, 1.0, 0.0, None, &one).unwrap();
        let b = minimize_psi(&problem, 1.0, 0.0, None, &two).unwrap();
        assert!(
            b.levels[0].1 <= a.levels[0].1 + 1e-10,
            "{} > {}",
            b.levels[0].1,
            a.levels[0].1
        );
    }

    #[test]
    fn domain_is_star_shaped_in_m() {
        let dom = DomainC::new(
            ParameterSpace::interval(-1.0, 1.0).unwrap(),
            SignalEnsemble::rademacher().law(),
            false,
        );
        for &(s, m) in &[(0.5, 0.7), (0.3, 0.5), (0.9, 0.9)] {
            if dom.contains(s, m, None) {
                assert!(dom.contains(s, m * 0.5, None) && dom.contains(s, 0.0, None));
            }
        }
    }
}
