//! Gaussian-equivalent Hamiltonian, overlap statistics and exact small-N
//! free energies.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::enumerate::{
    self, ArgmaxSet, GlobalTerm, LogPartition, PairObjective, Shell, Sums, DEFAULT_LIMIT,
};
use crate::error::{invalid, Error, Result};
use crate::info_params::InfoParams;
use crate::likelihoods::{LikelihoodPair, ParameterSpace};
use crate::linalg::{dot, SymMatrix};
use crate::optimize::{projected_ascent, AscentOptions};
use crate::rng::stream_rng;

/// `S = ‖x‖²/N`, `M = x·x⁰/N`, `v = x̄` and the cosine similarity with x⁰.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OverlapStats {
    pub s: f64,
    pub m: f64,
    pub v: f64,
    pub cos: f64,
}

pub fn overlaps(x: &[f64], x0: &[f64]) -> Result<OverlapStats> {
    if x.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: x.len(),
        });
    }
    let x0_sq = dot(x0, x0);
    Ok(Sums::of(x, x0).stats(x0_sq))
}

/// Cosine similarity with the all-ones direction.
pub fn cos_with_ones(x: &[f64]) -> f64 {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        x.iter().sum::<f64>() / (norm * (x.len() as f64).sqrt())
    }
}

/// Symmetric matrix with i.i.d. standard Gaussian upper triangle (diagonal included).
pub fn sample_disorder(n: usize, seed: u64) -> SymMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            (i..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    SymMatrix::from_upper_rows(n, rows)
}

/// `H(x) = (√β₁/√N) Σ_{i≤j} g_ij x_i x_j + (Nβ₂/2)M² − (Nβ₃/4)S² + β₄N^{3/2}x̄²`,
/// optionally with the correction `−β₄N^{3/2}x̄² + αNx̄²`.
#[derive(Clone, Debug)]
pub struct GaussianEquivalent {
    pub beta: InfoParams,
    pub disorder: SymMatrix,
    pub x0: Vec<f64>,
    pub alpha: f64,
    pub corrected: bool,
}

impl GaussianEquivalent {
    pub fn new(beta: InfoParams, x0: Vec<f64>, seed: u64) -> Self {
        let disorder = sample_disorder(x0.len(), seed);
        Self {
            beta,
            disorder,
            x0,
            alpha: 0.0,
            corrected: false,
        }
    }

    pub fn with_disorder(beta: InfoParams, disorder: SymMatrix, x0: Vec<f64>) -> Result<Self> {
        if disorder.n() != x0.len() {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                got: disorder.n(),
            });
        }
        Ok(Self {
            beta,
            disorder,
            x0,
            alpha: 0.0,
            corrected: false,
        })
    }

    pub fn corrected(mut self, alpha: f64) -> Self {
        self.corrected = true;
        self.alpha = alpha;
        self
    }

    pub fn n(&self) -> usize {
        self.x0.len()
    }

    fn coefficients(&self) -> Coefficients {
        let n = self.n() as f64;
        let b = &self.beta;
        let mean = if self.corrected {
            self.alpha * n
        } else {
            b.beta4 * n.powf(1.5)
        };
        Coefficients {
            disorder: b.beta1.max(0.0).sqrt() / n.sqrt(),
            signal: b.beta2,
            curvature: b.beta3,
            mean,
        }
    }

    /// Everything except the disorder term, as a function of the overlap sums.
    fn deterministic(&self) -> impl Fn(&Sums) -> f64 + Send + Sync + 'static {
        let c = self.coefficients();
        move |s: &Sums| {
            let n = s.n as f64;
            let (sm, mm, v) = (s.sq / n, s.dot0 / n, s.sum / n);
            0.5 * n * c.signal * mm * mm - 0.25 * n * c.curvature * sm * sm + c.mean * v * v
        }
    }

    pub fn hamiltonian(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        let c = self.coefficients();
        let quad = if c.disorder == 0.0 {
            0.0
        } else {
            self.disorder.upper_quadratic_form(x)
        };
        Ok(c.disorder * quad + self.deterministic()(&Sums::of(x, &self.x0)))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let c = self.coefficients();
        let nf = n as f64;
        let mut gx = vec![0.0; n];
        if c.disorder != 0.0 {
            self.disorder.matvec(x, &mut gx);
        }
        let sums = Sums::of(x, &self.x0);
        let (s, m, v) = (sums.sq / nf, sums.dot0 / nf, sums.sum / nf);
        Ok((0..n)
            .map(|k| {
                c.disorder * (gx[k] + self.disorder.get(k, k) * x[k]) + c.signal * m * self.x0[k]
                    - c.curvature * s * x[k]
                    + 2.0 * c.mean * v / nf
            })
            .collect())
    }

    /// Tabulated form of the Hamiltonian on a finite Ω, for exact enumeration.
    pub fn pair_objective(&self, omega: &ParameterSpace) -> Result<PairObjective> {
        let points = omega
            .points()
            .ok_or_else(|| invalid("omega", "exact enumeration needs a finite parameter space"))?;
        let c = self.coefficients();
        let g = &self.disorder;
        let global: GlobalTerm = Arc::new(self.deterministic());
        PairObjective::new(
            points,
            self.x0.clone(),
            |i, j, a, b| Ok(c.disorder * g.get(i, j) * a * b),
            |i, a| Ok(c.disorder * g.get(i, i) * a * a),
            global,
            true,
        )
    }
}

#[derive(Clone, Copy)]
struct Coefficients {
    disorder: f64,
    signal: f64,
    curvature: f64,
    /// Coefficient of `x̄²`.
    mean: f64,
}

/// The PML objective `Σ_{i≤j}[g(Y_ij, x_i x_j/√N) − g(Y_ij, 0)]` tabulated
/// on a finite Ω. Out-of-domain latent values are an error.
pub fn pml_pair_objective(
    pair: &LikelihoodPair,
    y: &SymMatrix,
    x0: &[f64],
) -> Result<PairObjective> {
    let points = pair
        .omega
        .points()
        .ok_or_else(|| invalid("omega", "exact enumeration needs a finite parameter space"))?;
    let n = y.n();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    let g = &pair.pseudo;
    let (lo, hi) = g.w_domain();
    let scale = 1.0 / (n as f64).sqrt();
    let term = |yv: f64, w: f64| -> Result<f64> {
        if w == 0.0 {
            return Ok(0.0);
        }
        if !(lo < w && w < hi) {
            return Err(Error::OutOfDomain { w, lo, hi });
        }
        Ok(g.logdensity(yv, w) - g.logdensity(yv, 0.0))
    };
    let even = points.iter().all(|p| points.contains(&-p));
    PairObjective::new(
        points,
        x0.to_vec(),
        |i, j, a, b| term(y.get(i, j), a * b * scale),
        |i, a| term(y.get(i, i), a * a * scale),
        Arc::new(|_: &Sums| 0.0),
        even,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    /// Exact enumeration (finite Ω, small N).
    Exhaustive,
    /// Augmented-Lagrangian projected ascent over conv(Ω).
    Penalized { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct ConstrainedMax {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub stats: OverlapStats,
    /// `max(|S − S*|, |M − M*|, |v − v*|)` at the returned point.
    pub residual: f64,
}

/// Maximum of `H` over Ω_ε(S, M[, v]).
pub fn constrained_max(
    ge: &GaussianEquivalent,
    omega: &ParameterSpace,
    shell: &Shell,
    strategy: Strategy,
) -> Result<ConstrainedMax> {
    if !(shell.eps > 0.0) {
        return Err(invalid("eps", "shell width must be positive"));
    }
    match strategy {
        Strategy::Exhaustive => {
            let obj = ge.pair_objective(omega)?;
            let set = enumerate::argmax_set(&obj, Some(shell), 1e-12, DEFAULT_LIMIT)?;
            let argmax = set.points[0].clone();
            let stats = overlaps(&argmax, &ge.x0)?;
            Ok(ConstrainedMax {
                value: set.value,
                residual: residual(&stats, shell),
                argmax,
                stats,
            })
        }
        Strategy::Penalized { seed } => penalized_max(ge, omega, shell, seed),
    }
}

fn residual(st: &OverlapStats, shell: &Shell) -> f64 {
    let mut r = (st.s - shell.s).abs().max((st.m - shell.m).abs());
    if let Some(v) = shell.v {
        r = r.max((st.v - v).abs());
    }
    r
}

fn penalized_max(
    ge: &GaussianEquivalent,
    omega: &ParameterSpace,
    shell: &Shell,
    seed: u64,
) -> Result<ConstrainedMax> {
    let n = ge.n();
    let nf = n as f64;
    let (lo, hi) = omega.hull();
    let mut rng = stream_rng(seed, 0);
    let x0_sq = dot(&ge.x0, &ge.x0) / nf;
    // start near the requested overlaps: a multiple of x⁰ plus noise
    let along = if x0_sq > 0.0 { shell.m / x0_sq } else { 0.0 };
    let spread = (shell.s - along * along * x0_sq).max(0.0).sqrt();
    let mut x: Vec<f64> = ge
        .x0
        .iter()
        .map(|&a| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (along * a + spread * z).clamp(lo, hi)
        })
        .collect();
    let mut mult = [0.0f64; 3];
    let mut weight = 1.0;
    let opts = AscentOptions::default();
    let target = [shell.s, shell.m, shell.v.unwrap_or(0.0)];
    let active = [true, true, shell.v.is_some()];
    for _round in 0..8 {
        let constraints = |x: &[f64]| {
            let s = Sums::of(x, &ge.x0);
            [
                s.sq / nf - target[0],
                s.dot0 / nf - target[1],
                s.sum / nf - target[2],
            ]
        };
        let value = |x: &[f64]| {
            let c = constraints(x);
            let pen: f64 = (0..3)
                .filter(|&k| active[k])
                .map(|k| mult[k] * c[k] + 0.5 * weight * c[k] * c[k])
                .sum();
            ge.hamiltonian(x).unwrap_or(f64::NAN) - nf * pen
        };
        let gradient = |x: &[f64]| {
            let c = constraints(x);
            let mut g = ge.gradient(x).expect("dimension checked");
            for k in 0..n {
                let dc = [2.0 * x[k] / nf, ge.x0[k] / nf, 1.0 / nf];
                for q in 0..3 {
                    if active[q] {
                        g[k] -= nf * (mult[q] + weight * c[q]) * dc[q];
                    }
                }
            }
            g
        };
        let out = projected_ascent(value, gradient, (lo, hi), &x, &opts, |_, _, _| {});
        x = out.x;
        let c = constraints(&x);
        for k in 0..3 {
            if active[k] {
                mult[k] += weight * c[k];
            }
        }
        let st = overlaps(&x, &ge.x0)?;
        if residual(&st, shell) <= shell.eps / 2.0 {
            break;
        }
        weight *= 10.0;
    }
    if let ParameterSpace::Finite(_) = omega {
        x = x.iter().map(|&v| omega.nearest(v)).collect();
    }
    let stats = overlaps(&x, &ge.x0)?;
    let res = residual(&stats, shell);
    if res > shell.eps {
        return Err(Error::EmptyShell);
    }
    Ok(ConstrainedMax {
        value: ge.hamiltonian(&x)?,
        argmax: x,
        stats,
        residual: res,
    })
}

/// `(1/(N L)) log Σ_{x ∈ Ωᴺ ∩ shell} exp(L f(x))` under counting measure;
/// `centered` subtracts the `log|Ω|/L` of the uniform prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergy {
    pub value: f64,
    pub centered: f64,
}

pub fn free_energy_exact(
    obj: &PairObjective,
    inverse_temperature: f64,
    shell: Option<&Shell>,
) -> Result<FreeEnergy> {
    if !(inverse_temperature > 0.0) {
        return Err(invalid("L", "inverse temperature must be positive"));
    }
    let z = enumerate::enumerate(obj, shell, DEFAULT_LIMIT, || {
        LogPartition::new(inverse_temperature)
    })?;
    if z.count() == 0.0 {
        return Err(Error::EmptyShell);
    }
    let nl = obj.n() as f64 * inverse_temperature;
    let value = z.value() / nl;
    let centered = value - (obj.points().len() as f64).ln() / inverse_temperature;
    Ok(FreeEnergy { value, centered })
}

/// Exact maximizers over Ωᴺ.
pub fn exact_argmax(obj: &PairObjective, rel_tol: f64) -> Result<ArgmaxSet> {
    enumerate::argmax_set(obj, None, rel_tol, DEFAULT_LIMIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize) -> SymMatrix {
        SymMatrix::from_upper(n, |_, _| 1.0)
    }

    #[test]
    fn hamiltonian_examples() {
        let b = InfoParams::from_betas(1.0, 1.0, 1.0, 0.0);
        let ge = GaussianEquivalent::with_disorder(b, ones(2), vec![1.0, 1.0]).unwrap();
        let h = ge.hamiltonian(&[1.0, 1.0]).unwrap();
        assert!((h - (3.0 / 2f64.sqrt() + 0.5)).abs() < 1e-12, "{h}");
        assert_eq!(ge.hamiltonian(&[0.0, 0.0]).unwrap(), 0.0);
        let n = 7;
        let ge = GaussianEquivalent::with_disorder(
            InfoParams::from_betas(0.0, 0.0, 0.0, 1.0),
            ones(n),
            vec![1.0; n],
        )
        .unwrap();
        assert!((ge.hamiltonian(&vec![1.0; n]).unwrap() - (n as f64).powf(1.5)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let n = 20;
        let b = InfoParams::from_betas(1.3, 0.7, 0.9, 0.4);
        let x0: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        for ge in [
            GaussianEquivalent::new(b.clone(), x0.clone(), 3),
            GaussianEquivalent::new(b.clone(), x0.clone(), 3).corrected(0.6),
        ] {
            let mut rng = stream_rng(9, 0);
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = ge.gradient(&x).unwrap();
            for k in 0..n {
                let h = 1e-5;
                let mut up = x.clone();
                up[k] += h;
                let mut down = x.clone();
                down[k] -= h;
                let fd =
                    (ge.hamiltonian(&up).unwrap() - ge.hamiltonian(&down).unwrap()) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0),
                    "{k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn overlap_examples() {
        let x0 = vec![1.0, -1.0, 1.0, 1.0];
        let st = overlaps(&x0, &x0).unwrap();
        assert_eq!((st.s, st.m, st.cos), (1.0, 1.0, 1.0));
        let st = overlaps(&[1.0, 1.0, 0.0, 0.0], &x0).unwrap();
        assert_eq!((st.m, st.cos), (0.0, 0.0));
        let x: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let st = overlaps(&x, &x0).unwrap();
        assert_eq!((st.s, st.m, st.cos), (4.0, 2.0, 1.0));
        assert_eq!(overlaps(&[0.0; 4], &x0).unwrap().cos, 0.0);
    }

    #[test]
    fn hypercube_shells_away_from_unit_norm_are_empty() {
        let ge =
            GaussianEquivalent::new(InfoParams::from_betas(1.0, 0.0, 0.0, 0.0), vec![1.0; 6], 1);
        let sh = Shell {
            s: 0.5,
            m: 0.0,
            v: None,
            eps: 0.2,
        };
        assert!(matches!(
            constrained_max(&ge, &ParameterSpace::pm_one(), &sh, Strategy::Exhaustive),
            Err(Error::EmptyShell)
        ));
    }

    #[test]
    fn deterministic_shell_value() {
        let n = 50;
        let b = InfoParams::from_betas(0.0, 1.2, 0.8, 0.0);
        let ge = GaussianEquivalent::new(b, vec![1.0; n], 4);
        let omega = ParameterSpace::interval(-1.0, 1.0).unwrap();
        let sh = Shell {
            s: 1.0,
            m: 1.0,
            v: None,
            eps: 0.05,
        };
        let r = constrained_max(&ge, &omega, &sh, Strategy::Penalized { seed: 2 }).unwrap();
        assert!(
            (r.value / n as f64 - (0.6 - 0.2)).abs() < 0.03,
            "{}",
            r.value / n as f64
        );
    }

    #[test]
    fn sandwich_and_trivial_free_energy() {
        let ge =
            GaussianEquivalent::new(InfoParams::from_betas(1.0, 0.5, 0.5, 0.0), vec![1.0; 10], 8);
        let obj = ge.pair_objective(&ParameterSpace::pm_one()).unwrap();
        let max = exact_argmax(&obj, 1e-12).unwrap().value / 10.0;
        let f = free_energy_exact(&obj, 64.0, None).unwrap().value;
        assert!(f >= max - 1e-12 && f <= max + 2f64.ln() / 64.0 + 1e-12);
        let zero =
            GaussianEquivalent::new(InfoParams::from_betas(0.0, 0.0, 0.0, 0.0), vec![1.0], 0);
        let fe = free_energy_exact(
            &zero.pair_objective(&ParameterSpace::pm_one()).unwrap(),
            1.0,
            None,
        )
        .unwrap();
        assert!((fe.value - 2f64.ln()).abs() < 1e-15 && fe.centered.abs() < 1e-15);
    }
}
