//! Per-entry likelihood families, null measures, parameter spaces and the
//! builtin model registry.
//!
//! An observation `y` is always a real number; discrete models embed their
//! support in ℝ. The latent value is `w = x_i x_j / √N`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::datagen::SignalEnsemble;
use crate::error::{invalid, Error, Result};
use crate::linalg::SymMatrix;
use crate::quadrature::integrate;
use crate::rng::Rng;
use crate::special::{inv_mills, ln_factorial, log_norm_cdf, norm_pdf, LN_SQRT_2PI};

// ---------------------------------------------------------------------------
// Parameter space

/// Compact set Ω of admissible signal coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum ParameterSpace {
    /// Sorted, deduplicated points.
    Finite(Vec<f64>),
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl ParameterSpace {
    pub fn finite(points: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut pts: Vec<f64> = points.into_iter().collect();
        if pts.is_empty() {
            return Err(invalid("omega", "empty point set"));
        }
        if pts.iter().any(|p| !p.is_finite()) {
            return Err(invalid("omega", "points must be finite"));
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        Ok(Self::Finite(pts))
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid("omega", format!("bad interval [{lo}, {hi}]")));
        }
        Ok(Self::Interval { lo, hi })
    }

    /// The hypercube alphabet {−1, 1}.
    pub fn pm_one() -> Self {
        Self::Finite(vec![-1.0, 1.0])
    }

    /// `C = max |x|`.
    pub fn bound(&self) -> f64 {
        let (lo, hi) = self.hull();
        lo.abs().max(hi.abs())
    }

    /// Endpoints of conv(Ω).
    pub fn hull(&self) -> (f64, f64) {
        match self {
            Self::Finite(p) => (p[0], p[p.len() - 1]),
            Self::Interval { lo, hi } => (*lo, *hi),
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, Self::Finite(_))
    }

    pub fn points(&self) -> Option<&[f64]> {
        match self {
            Self::Finite(p) => Some(p),
            Self::Interval { .. } => None,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self {
            Self::Finite(p) => p.iter().any(|&q| q == x),
            Self::Interval { lo, hi } => *lo <= x && x <= *hi,
        }
    }

    /// Projection onto conv(Ω).
    pub fn project(&self, x: f64) -> f64 {
        let (lo, hi) = self.hull();
        x.clamp(lo, hi)
    }

    /// Nearest point of Ω (ties go to the smaller point).
    pub fn nearest(&self, x: f64) -> f64 {
        match self {
            Self::Finite(p) => p
                .iter()
                .copied()
                .min_by(|a, b| (a - x).abs().total_cmp(&(b - x).abs()))
                .expect("nonempty"),
            Self::Interval { .. } => self.project(x),
        }
    }

    /// `Some(C)` when every point has `|x| = C`.
    pub fn constant_norm(&self) -> Option<f64> {
        match self {
            Self::Finite(p) => {
                let c = p[0].abs();
                p.iter()
                    .all(|q| (q.abs() - c).abs() <= 1e-12 * c.max(1.0))
                    .then_some(c)
            }
            Self::Interval { lo, hi } => (lo == hi).then_some(lo.abs()),
        }
    }

    pub fn cardinality(&self) -> Option<usize> {
        self.points().map(<[f64]>::len)
    }
}

impl fmt::Display for ParameterSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(p) => {
                let parts: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
                write!(f, "{{{}}}", parts.join(","))
            }
            Self::Interval { lo, hi } => write!(f, "[{lo},{hi}]"),
        }
    }
}

impl FromStr for ParameterSpace {
    type Err = Error;

    /// Accepts `pm1`, `{a,b,...}` and `[lo,hi]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_list = |inner: &str| -> Result<Vec<f64>> {
            inner
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| invalid("omega", format!("bad number `{t}`")))
                })
                .collect()
        };
        match s {
            "pm1" | "hypercube" => Ok(Self::pm_one()),
            "01" | "binary" => Self::finite([0.0, 1.0]),
            _ if s.starts_with('{') && s.ends_with('}') => {
                Self::finite(parse_list(&s[1..s.len() - 1])?)
            }
            _ if s.starts_with('[') && s.ends_with(']') => {
                let v = parse_list(&s[1..s.len() - 1])?;
                if v.len() != 2 {
                    return Err(invalid("omega", "interval needs two endpoints"));
                }
                Self::interval(v[0], v[1])
            }
            _ => Err(invalid("omega", format!("cannot parse `{s}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Likelihood families

/// Observation support of a likelihood family.
#[derive(Clone, Debug, PartialEq)]
pub enum Support {
    Real,
    PositiveReal,
    Integers,
    Points(Vec<f64>),
}

type LogDensityFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// User-supplied likelihood; derivatives by central differences.
#[derive(Clone)]
pub struct CustomLikelihood {
    pub name: String,
    pub logdensity: LogDensityFn,
    pub w_domain: (f64, f64),
    pub support: Support,
}

impl fmt::Debug for CustomLikelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomLikelihood")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

/// `g(y, w) − g(y, 0) = scale·(y − shift)·w + curvature·w²` for Gaussian-type families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadraticForm {
    pub scale: f64,
    pub shift: f64,
    pub curvature: f64,
}

#[derive(Clone, Debug)]
pub enum Likelihood {
    /// `−(y − slope·w − offset)²/(2·variance) − ½log(2π·variance)`.
    Gaussian {
        slope: f64,
        offset: f64,
        variance: f64,
    },
    /// `−½(y − w)² − ((curvature − 1)/2)·w²`; not a density in `y`.
    RidgedGaussian {
        curvature: f64,
    },
    /// `y·log(base + slope·w) + (1 − y)·log(1 − base − slope·w)`, `y ∈ {0,1}`.
    Bernoulli {
        base: f64,
        slope: f64,
    },
    /// `P(Y = ±1) = p/2 + λw` each, `P(Y = 0) = 1 − p − 2λw`.
    SparseRademacher {
        p: f64,
        lambda: f64,
    },
    /// Sign of a unit Gaussian with mean `λw`.
    Probit {
        lambda: f64,
    },
    /// Random sign times a Poisson variable with rate `rate + w`.
    SymmetricPoisson {
        rate: f64,
    },
    /// Square of a unit Gaussian with mean `λw`.
    SquaredGaussian {
        lambda: f64,
    },
    Custom(CustomLikelihood),
}

const FD_STEP: f64 = 1e-5;

impl Likelihood {
    pub fn name(&self) -> String {
        match self {
            Self::Gaussian {
                slope,
                offset,
                variance,
            } => {
                format!("gaussian(slope={slope}, offset={offset}, variance={variance})")
            }
            Self::RidgedGaussian { curvature } => format!("ridged-gaussian(curvature={curvature})"),
            Self::Bernoulli { base, slope } => format!("bernoulli(base={base}, slope={slope})"),
            Self::SparseRademacher { p, lambda } => {
                format!("sparse-rademacher(p={p}, lambda={lambda})")
            }
            Self::Probit { lambda } => format!("probit(lambda={lambda})"),
            Self::SymmetricPoisson { rate } => format!("symmetric-poisson(rate={rate})"),
            Self::SquaredGaussian { lambda } => format!("squared-gaussian(lambda={lambda})"),
            Self::Custom(c) => c.name.clone(),
        }
    }

    /// Open interval U of admissible `w`.
    pub fn w_domain(&self) -> (f64, f64) {
        match self {
            Self::Gaussian { .. }
            | Self::RidgedGaussian { .. }
            | Self::Probit { .. }
            | Self::SquaredGaussian { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Bernoulli { base, slope } => {
                if *slope == 0.0 {
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let a = -base / slope;
                    let b = (1.0 - base) / slope;
                    (a.min(b), a.max(b))
                }
            }
            Self::SparseRademacher { p, lambda } => {
                if *lambda == 0.0 {
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let a = -p / (2.0 * lambda);
                    let b = (1.0 - p) / (2.0 * lambda);
                    (a.min(b), a.max(b))
                }
            }
            Self::SymmetricPoisson { rate } => (-rate, f64::INFINITY),
            Self::Custom(c) => c.w_domain,
        }
    }

    pub fn in_domain(&self, w: f64) -> bool {
        let (lo, hi) = self.w_domain();
        lo < w && w < hi
    }

    pub fn support(&self) -> Support {
        match self {
            Self::Gaussian { .. } | Self::RidgedGaussian { .. } => Support::Real,
            Self::Bernoulli { .. } => Support::Points(vec![0.0, 1.0]),
            Self::SparseRademacher { .. } => Support::Points(vec![-1.0, 0.0, 1.0]),
            Self::Probit { .. } => Support::Points(vec![-1.0, 1.0]),
            Self::SymmetricPoisson { .. } => Support::Integers,
            Self::SquaredGaussian { .. } => Support::PositiveReal,
            Self::Custom(c) => c.support.clone(),
        }
    }

    /// Whether `exp(g(·, w))` is a probability density/mass function in `y`.
    pub fn is_density(&self) -> bool {
        !matches!(self, Self::RidgedGaussian { .. } | Self::Custom(_))
    }

    pub fn logdensity(&self, y: f64, w: f64) -> f64 {
        match self {
            Self::Gaussian {
                slope,
                offset,
                variance,
            } => {
                let r = y - slope * w - offset;
                -r * r / (2.0 * variance) - 0.5 * variance.ln() - LN_SQRT_2PI
            }
            Self::RidgedGaussian { curvature } => {
                -0.5 * (y - w) * (y - w) - 0.5 * (curvature - 1.0) * w * w
            }
            Self::Bernoulli { base, slope } => {
                let q = base + slope * w;
                if y >= 0.5 {
                    q.ln()
                } else {
                    (1.0 - q).ln()
                }
            }
            Self::SparseRademacher { p, lambda } => {
                if y == 0.0 {
                    (1.0 - p - 2.0 * lambda * w).ln()
                } else {
                    (0.5 * p + lambda * w).ln()
                }
            }
            Self::Probit { lambda } => {
                if y >= 0.0 {
                    log_norm_cdf(lambda * w)
                } else {
                    log_norm_cdf(-lambda * w)
                }
            }
            Self::SymmetricPoisson { rate } => {
                let k = y.abs().round();
                let r = rate + w;
                let sign_term = if k == 0.0 {
                    0.0
                } else {
                    -std::f64::consts::LN_2
                };
                let kr = if k == 0.0 { 0.0 } else { k * r.ln() };
                sign_term + kr - ln_factorial(k as u64) - r
            }
            Self::SquaredGaussian { lambda } => {
                if y <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let s = y.sqrt();
                let a = lambda * w;
                let sa = (s * a).abs();
                // log(2 cosh(sa)) = sa + log(1 + e^{-2sa})
                -LN_SQRT_2PI - (2.0 * s).ln() - 0.5 * (y + a * a) + sa + (-2.0 * sa).exp().ln_1p()
            }
            Self::Custom(c) => (c.logdensity)(y, w),
        }
    }

    /// `∂_w g(y, w)`.
    pub fn d1(&self, y: f64, w: f64) -> f64 {
        match self {
            Self::Gaussian {
                slope,
                offset,
                variance,
            } => slope * (y - slope * w - offset) / variance,
            Self::RidgedGaussian { curvature } => y - curvature * w,
            Self::Bernoulli { base, slope } => {
                let q = base + slope * w;
                if y >= 0.5 {
                    slope / q
                } else {
                    -slope / (1.0 - q)
                }
            }
            Self::SparseRademacher { p, lambda } => {
                if y == 0.0 {
                    -2.0 * lambda / (1.0 - p - 2.0 * lambda * w)
                } else {
                    lambda / (0.5 * p + lambda * w)
                }
            }
            Self::Probit { lambda } => {
                if y >= 0.0 {
                    lambda * inv_mills(lambda * w)
                } else {
                    -lambda * inv_mills(-lambda * w)
                }
            }
            Self::SymmetricPoisson { rate } => y.abs().round() / (rate + w) - 1.0,
            Self::SquaredGaussian { lambda } => {
                let s = y.max(0.0).sqrt();
                let a = lambda * w;
                -lambda * a + lambda * s * (s * a).tanh()
            }
            Self::Custom(_) => {
                (self.logdensity(y, w + FD_STEP) - self.logdensity(y, w - FD_STEP))
                    / (2.0 * FD_STEP)
            }
        }
    }

    /// `∂²_w g(y, w)`.
    pub fn d2(&self, y: f64, w: f64) -> f64 {
        match self {
            Self::Gaussian {
                slope, variance, ..
            } => -slope * slope / variance,
            Self::RidgedGaussian { curvature } => -curvature,
            Self::Bernoulli { base, slope } => {
                let q = base + slope * w;
                if y >= 0.5 {
                    -slope * slope / (q * q)
                } else {
                    -slope * slope / ((1.0 - q) * (1.0 - q))
                }
            }
            Self::SparseRademacher { p, lambda } => {
                if y == 0.0 {
                    let d = 1.0 - p - 2.0 * lambda * w;
                    -4.0 * lambda * lambda / (d * d)
                } else {
                    let d = 0.5 * p + lambda * w;
                    -lambda * lambda / (d * d)
                }
            }
            Self::Probit { lambda } => {
                // d/dt (φ/Φ)(t) = −h(t)(t + h(t))
                let t = if y >= 0.0 { lambda * w } else { -lambda * w };
                let h = inv_mills(t);
                -lambda * lambda * h * (t + h)
            }
            Self::SymmetricPoisson { rate } => {
                let r = rate + w;
                -y.abs().round() / (r * r)
            }
            Self::SquaredGaussian { lambda } => {
                let s = y.max(0.0).sqrt();
                let sech = 1.0 / (s * lambda * w).cosh();
                -lambda * lambda + lambda * lambda * y * sech * sech
            }
            Self::Custom(_) => {
                let g0 = self.logdensity(y, w);
                (self.logdensity(y, w + FD_STEP) - 2.0 * g0 + self.logdensity(y, w - FD_STEP))
                    / (FD_STEP * FD_STEP)
            }
        }
    }

    /// `∂³_w g(y, w)`.
    pub fn d3(&self, y: f64, w: f64) -> f64 {
        match self {
            Self::Gaussian { .. } | Self::RidgedGaussian { .. } => 0.0,
            Self::Bernoulli { base, slope } => {
                let q = base + slope * w;
                let s3 = slope * slope * slope;
                if y >= 0.5 {
                    2.0 * s3 / (q * q * q)
                } else {
                    -2.0 * s3 / ((1.0 - q) * (1.0 - q) * (1.0 - q))
                }
            }
            Self::SparseRademacher { p, lambda } => {
                let l3 = lambda * lambda * lambda;
                if y == 0.0 {
                    let d = 1.0 - p - 2.0 * lambda * w;
                    -16.0 * l3 / (d * d * d)
                } else {
                    let d = 0.5 * p + lambda * w;
                    2.0 * l3 / (d * d * d)
                }
            }
            Self::SymmetricPoisson { rate } => {
                let r = rate + w;
                2.0 * y.abs().round() / (r * r * r)
            }
            _ => {
                let h = 1e-4;
                (self.d2(y, w + h) - self.d2(y, w - h)) / (2.0 * h)
            }
        }
    }

    /// Gaussian-type families are exactly quadratic in `w`.
    pub fn quadratic(&self) -> Option<QuadraticForm> {
        match self {
            Self::Gaussian {
                slope,
                offset,
                variance,
            } => Some(QuadraticForm {
                scale: slope / variance,
                shift: *offset,
                curvature: -slope * slope / (2.0 * variance),
            }),
            Self::RidgedGaussian { curvature } => Some(QuadraticForm {
                scale: 1.0,
                shift: 0.0,
                curvature: -curvature / 2.0,
            }),
            _ => None,
        }
    }

    /// Draws `Y` from the conditional law at latent value `w`.
    pub fn sample(&self, w: f64, rng: &mut Rng) -> Result<f64> {
        let check = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(p)
            } else {
                Err(Error::ProbabilityOutOfRange { p, i: 0, j: 0 })
            }
        };
        match self {
            Self::Gaussian {
                slope,
                offset,
                variance,
            } => {
                let z: f64 = StandardNormal.sample(rng);
                Ok(offset + slope * w + variance.sqrt() * z)
            }
            Self::Bernoulli { base, slope } => {
                let p = check(base + slope * w)?;
                Ok(if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            }
            Self::SparseRademacher { p, lambda } => {
                let each = check(0.5 * p + lambda * w)?;
                check(1.0 - p - 2.0 * lambda * w)?;
                let u: f64 = rng.random();
                Ok(if u < each {
                    1.0
                } else if u < 2.0 * each {
                    -1.0
                } else {
                    0.0
                })
            }
            Self::Probit { lambda } => {
                let z: f64 = StandardNormal.sample(rng);
                // sgn(0) = 1
                Ok(if lambda * w + z >= 0.0 { 1.0 } else { -1.0 })
            }
            Self::SymmetricPoisson { rate } => {
                let r = rate + w;
                if r <= 0.0 {
                    return Err(invalid(
                        "rate",
                        format!("Poisson rate {r} must be positive"),
                    ));
                }
                let k: f64 = Poisson::new(r)
                    .map_err(|e| invalid("rate", e.to_string()))?
                    .sample(rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Ok(if k == 0.0 { 0.0 } else { sign * k })
            }
            Self::SquaredGaussian { lambda } => {
                let z: f64 = StandardNormal.sample(rng);
                Ok((lambda * w + z).powi(2))
            }
            Self::RidgedGaussian { .. } | Self::Custom(_) => Err(Error::NotSampleable(self.name())),
        }
    }

    /// Law of `Y` at `w = 0`.
    pub fn null_measure(&self) -> Result<NullMeasure> {
        match self {
            Self::Gaussian {
                offset, variance, ..
            } => Ok(NullMeasure::Gaussian {
                mean: *offset,
                sd: variance.sqrt(),
            }),
            Self::Bernoulli { base, .. } => {
                NullMeasure::discrete(vec![0.0, 1.0], vec![1.0 - base, *base])
            }
            Self::SparseRademacher { p, .. } => {
                NullMeasure::discrete(vec![-1.0, 0.0, 1.0], vec![0.5 * p, 1.0 - p, 0.5 * p])
            }
            Self::Probit { .. } => NullMeasure::discrete(vec![-1.0, 1.0], vec![0.5, 0.5]),
            Self::SymmetricPoisson { rate } => {
                let kmax = (rate + 12.0 * rate.sqrt() + 25.0).ceil() as i64;
                let mut atoms = Vec::new();
                let mut masses = Vec::new();
                for k in -kmax..=kmax {
                    atoms.push(k as f64);
                    masses.push(self.logdensity(k as f64, 0.0).exp());
                }
                NullMeasure::discrete(atoms, masses)
            }
            Self::SquaredGaussian { .. } => Ok(NullMeasure::SquaredGaussian),
            Self::RidgedGaussian { .. } | Self::Custom(_) => Err(Error::NotSampleable(self.name())),
        }
    }

    /// Integral of `f` against the reference measure of the observation space
    /// (Lebesgue or counting), over a window wide enough for builtin models.
    fn reference_integral(&self, f: impl Fn(f64) -> f64, scale: f64) -> f64 {
        match self.support() {
            Support::Points(pts) => pts.iter().map(|&y| f(y)).sum(),
            Support::Integers => {
                let rate = match self {
                    Self::SymmetricPoisson { rate } => *rate,
                    _ => 10.0,
                };
                let kmax = (scale * (rate + 12.0 * rate.sqrt() + 25.0)).ceil() as i64;
                (-kmax..=kmax).map(|k| f(k as f64)).sum()
            }
            Support::Real => {
                let (m, s) = match self {
                    Self::Gaussian {
                        offset, variance, ..
                    } => (*offset, variance.sqrt()),
                    _ => (0.0, 1.0),
                };
                integrate(&f, m - 12.0 * s * scale, m + 12.0 * s * scale, 1e-13, 1e-12).value
            }
            Support::PositiveReal => {
                // substitute y = s², dy = 2s ds to remove the origin singularity
                integrate(|s| 2.0 * s * f(s * s), 0.0, 12.0 * scale, 1e-13, 1e-12).value
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Null measure

/// Law ℙ₀ of an entry under the null `w = 0`.
#[derive(Clone, Debug, PartialEq)]
pub enum NullMeasure {
    Gaussian {
        mean: f64,
        sd: f64,
    },
    /// Law of `Z²`, `Z ~ N(0,1)`.
    SquaredGaussian,
    Discrete {
        atoms: Vec<f64>,
        masses: Vec<f64>,
    },
}

impl NullMeasure {
    pub fn discrete(atoms: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if atoms.len() != masses.len() || atoms.is_empty() {
            return Err(invalid(
                "null",
                "atoms and masses must be nonempty and aligned",
            ));
        }
        if masses.iter().any(|&m| !(m >= 0.0)) {
            return Err(invalid("null", "masses must be nonnegative"));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("null", format!("masses sum to {total}")));
        }
        Ok(Self::Discrete { atoms, masses })
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Discrete { .. })
    }

    /// `E₀ f(Y)`: exact sum for discrete laws, adaptive quadrature over
    /// `[m − 10σ, m + 10σ]` otherwise.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        match self {
            Self::Gaussian { mean, sd } => {
                if *sd == 0.0 {
                    return f(*mean);
                }
                integrate(
                    |y| {
                        let z = (y - mean) / sd;
                        f(y) * norm_pdf(z) / sd
                    },
                    mean - 10.0 * sd,
                    mean + 10.0 * sd,
                    1e-13,
                    1e-13,
                )
                .value
            }
            Self::SquaredGaussian => {
                integrate(|s| 2.0 * norm_pdf(s) * f(s * s), 0.0, 10.0, 1e-13, 1e-13).value
            }
            Self::Discrete { atoms, masses } => {
                atoms.iter().zip(masses).map(|(&y, &m)| m * f(y)).sum()
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.expect(|_| 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.expect(|y| y)
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Self::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Self::SquaredGaussian => {
                let z: f64 = StandardNormal.sample(rng);
                z * z
            }
            Self::Discrete { atoms, masses } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (a, m) in atoms.iter().zip(masses) {
                    acc += m;
                    if u < acc {
                        return *a;
                    }
                }
                atoms[atoms.len() - 1]
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Builtin registry

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    SpikedWigner,
    Sbm,
    SparseRademacher,
    SignedWigner,
    SparsePca,
    PoissonBernoulli,
    SquaredEntries,
    Universal,
}

impl ModelId {
    pub const ALL: [ModelId; 8] = [
        Self::SpikedWigner,
        Self::Sbm,
        Self::SparseRademacher,
        Self::SignedWigner,
        Self::SparsePca,
        Self::PoissonBernoulli,
        Self::SquaredEntries,
        Self::Universal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SpikedWigner => "spiked_wigner",
            Self::Sbm => "sbm",
            Self::SparseRademacher => "sparse_rademacher",
            Self::SignedWigner => "signed_wigner",
            Self::SparsePca => "sparse_pca",
            Self::PoissonBernoulli => "poisson_bernoulli",
            Self::SquaredEntries => "squared_entries",
            Self::Universal => "universal",
        }
    }

    fn known_params(self) -> &'static [&'static str] {
        match self {
            Self::SpikedWigner => &["lambda", "lambda0", "c"],
            Self::Sbm => &["mu", "mu0", "p"],
            Self::SparseRademacher => &["lambda", "p", "pseudo"],
            Self::SignedWigner => &["lambda", "lambda0"],
            Self::SparsePca => &["lambda", "lambda0", "rho"],
            Self::PoissonBernoulli => &["lambda", "lambda0"],
            Self::SquaredEntries => &["lambda"],
            Self::Universal => &["b1", "b2", "b3", "b4"],
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().replace('-', "_").to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .or(match key.as_str() {
                "signed" | "censored_wigner" => Some(Self::SignedWigner),
                "poisson" => Some(Self::PoissonBernoulli),
                "wigner" => Some(Self::SpikedWigner),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// `key=value` model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams(pub BTreeMap<String, String>);

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `k=v` items separated by commas or whitespace.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for item in s
            .split([',', ' ', ';'])
            .map(str::trim)
            .filter(|t| !t.is_empty())
        {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| invalid(item, "expected key=value"))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(m))
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| invalid(key, format!("`{v}` is not a number")))
            })
            .transpose()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.get_f64(key)?.unwrap_or(default))
    }
}

impl fmt::Display for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// An inference task: the true log-likelihood `truth` (g₀) and the
/// pseudo-log-likelihood `pseudo` (g) used by the estimator.
#[derive(Clone, Debug)]
pub struct LikelihoodPair {
    pub name: String,
    pub truth: Likelihood,
    pub pseudo: Likelihood,
    pub null: NullMeasure,
    pub omega: ParameterSpace,
    pub signal: SignalEnsemble,
    /// Unbounded `∂²_w g` in `y` is tolerated (reported as a flag, not a failure).
    pub admits_unbounded_curvature: bool,
}

impl LikelihoodPair {
    pub fn new(
        name: impl Into<String>,
        truth: Likelihood,
        pseudo: Likelihood,
        omega: ParameterSpace,
        signal: SignalEnsemble,
    ) -> Result<Self> {
        let null = truth.null_measure()?;
        Ok(Self {
            name: name.into(),
            truth,
            pseudo,
            null,
            omega,
            signal,
            admits_unbounded_curvature: false,
        })
    }

    pub fn with_omega(mut self, omega: ParameterSpace) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_signal(mut self, signal: SignalEnsemble) -> Self {
        self.signal = signal;
        self
    }

    /// The same task with `truth` used as the pseudo-likelihood (the MLE).
    pub fn well_specified(&self) -> Self {
        let mut p = self.clone();
        p.pseudo = p.truth.clone();
        p.name = format!("{}[mle]", self.name);
        p
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(name, format!("{v} must be positive")))
    }
}

fn unit_open(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(invalid(name, format!("{v} must lie in (0, 1)")))
    }
}

/// Constructs a builtin task. Unspecified pseudo-likelihood parameters default
/// to the data-generating ones (well-specified).
pub fn builtin(model: ModelId, params: &ModelParams) -> Result<LikelihoodPair> {
    for key in params.0.keys() {
        if !model.known_params().contains(&key.as_str()) {
            return Err(invalid(key, format!("not a parameter of {model}")));
        }
    }
    let name = if params.0.is_empty() {
        model.to_string()
    } else {
        format!("{model}({params})")
    };
    let pair = match model {
        ModelId::SpikedWigner => {
            let lambda0 = params.f64_or("lambda0", 1.0)?;
            let lambda = params.f64_or("lambda", lambda0)?;
            let c = params.f64_or("c", 0.0)?;
            LikelihoodPair::new(
                name,
                Likelihood::Gaussian {
                    slope: lambda0,
                    offset: c,
                    variance: 1.0,
                },
                Likelihood::Gaussian {
                    slope: lambda,
                    offset: 0.0,
                    variance: 1.0,
                },
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?
        }
        ModelId::Sbm => {
            let mu0 = params.f64_or("mu0", params.f64_or("mu", 0.25)?)?;
            let mu = params.f64_or("mu", mu0)?;
            let p = unit_open("p", params.f64_or("p", 0.5)?)?;
            if mu0 < 0.0 {
                return Err(invalid("mu0", "must be nonnegative"));
            }
            LikelihoodPair::new(
                name,
                Likelihood::Bernoulli {
                    base: 0.5,
                    slope: mu0,
                },
                Likelihood::Bernoulli { base: p, slope: mu },
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?
        }
        ModelId::SparseRademacher => {
            let p = unit_open("p", params.f64_or("p", 0.5)?)?;
            let lambda = params.f64_or("lambda", 0.5)?;
            let truth = Likelihood::SparseRademacher { p, lambda };
            let pseudo = match params
                .0
                .get("pseudo")
                .map(String::as_str)
                .unwrap_or("gaussian")
            {
                "gaussian" | "ls" => Likelihood::Gaussian {
                    slope: lambda,
                    offset: 0.0,
                    variance: 1.0,
                },
                "true" | "mle" => truth.clone(),
                other => return Err(invalid("pseudo", format!("`{other}` is not gaussian|true"))),
            };
            LikelihoodPair::new(
                name,
                truth,
                pseudo,
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?
        }
        ModelId::SignedWigner => {
            let lambda0 = params.f64_or("lambda0", 1.0)?;
            let lambda = params.f64_or("lambda", lambda0)?;
            LikelihoodPair::new(
                name,
                Likelihood::Probit { lambda: lambda0 },
                Likelihood::Probit { lambda },
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?
        }
        ModelId::SparsePca => {
            let lambda0 = params.f64_or("lambda0", 1.0)?;
            let lambda = params.f64_or("lambda", lambda0)?;
            let rho = unit_open("rho", params.f64_or("rho", 0.1)?)?;
            LikelihoodPair::new(
                name,
                Likelihood::Gaussian {
                    slope: lambda0,
                    offset: 0.0,
                    variance: 1.0,
                },
                Likelihood::Gaussian {
                    slope: lambda,
                    offset: 0.0,
                    variance: 1.0,
                },
                ParameterSpace::finite([0.0, 1.0])?,
                SignalEnsemble::bernoulli(rho)?,
            )?
        }
        ModelId::PoissonBernoulli => {
            let lambda0 = positive(
                "lambda0",
                params.f64_or("lambda0", params.f64_or("lambda", 2.0)?)?,
            )?;
            let lambda = positive("lambda", params.f64_or("lambda", lambda0)?)?;
            let mut pair = LikelihoodPair::new(
                name,
                Likelihood::SymmetricPoisson { rate: lambda0 },
                Likelihood::SymmetricPoisson { rate: lambda },
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?;
            pair.admits_unbounded_curvature = true;
            pair
        }
        ModelId::SquaredEntries => {
            let lambda = params.f64_or("lambda", 1.0)?;
            LikelihoodPair::new(
                name,
                Likelihood::SquaredGaussian { lambda },
                Likelihood::SquaredGaussian { lambda },
                ParameterSpace::pm_one(),
                SignalEnsemble::rademacher(),
            )?
        }
        ModelId::Universal => {
            let get = |k: &str| -> Result<f64> {
                params.get_f64(k)?.ok_or_else(|| invalid(k, "required"))
            };
            let ip = crate::info_params::InfoParams::from_betas(
                get("b1")?,
                get("b2")?,
                get("b3")?,
                get("b4")?,
            );
            let mut pair = crate::equivalence::universal_task(&ip)?;
            pair.name = name;
            pair
        }
    };
    Ok(pair)
}

/// Parses `id` or `id:k=v,k=v` into a builtin task.
pub fn builtin_from_spec(spec: &str) -> Result<LikelihoodPair> {
    let (id, rest) = spec.split_once(':').unwrap_or((spec, ""));
    builtin(id.parse()?, &ModelParams::parse(rest)?)
}

// ---------------------------------------------------------------------------
// Regularity validator

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F0Condition {
    Normalization,
    FourthMoment,
    CurvatureAtZero,
    ThirdDerivative,
}

impl fmt::Display for F0Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalization => "exp(g(·,0)) not normalizable",
            Self::FourthMoment => "E₀|∂_w g(·,0)|⁴ infinite",
            Self::CurvatureAtZero => "∂²_w g(·,0) unbounded",
            Self::ThirdDerivative => "∂³_w g unbounded on U",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub condition: F0Condition,
    /// `"g0"` or `"g"`.
    pub which: &'static str,
    pub detail: String,
    /// Tolerated for this model (reported as a flag).
    pub admitted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F0Status {
    Pass,
    PassWithFlag,
    Fail,
}

#[derive(Clone, Debug)]
pub struct F0Report {
    pub pass: bool,
    pub status: F0Status,
    pub violations: Vec<Violation>,
}

impl F0Report {
    pub fn failing_conditions(&self) -> Vec<String> {
        self.violations
            .iter()
            .filter(|v| !v.admitted)
            .map(|v| v.condition.to_string())
            .collect()
    }
}

/// Sup of `|f|` over observation windows of growing width; returns (inner, outer).
fn window_sups(lik: &Likelihood, null: &NullMeasure, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let sup_over = |ys: &mut dyn Iterator<Item = f64>| ys.map(|y| f(y).abs()).fold(0.0, f64::max);
    match lik.support() {
        Support::Points(pts) => {
            let s = sup_over(&mut pts.iter().copied());
            (s, s)
        }
        Support::Integers => {
            let k = match lik {
                Likelihood::SymmetricPoisson { rate } => {
                    (rate + 10.0 * rate.sqrt() + 10.0).ceil() as i64
                }
                _ => 50,
            };
            let inner = sup_over(&mut (-k..=k).map(|v| v as f64));
            let outer = sup_over(&mut (-4 * k..=4 * k).map(|v| v as f64));
            (inner, outer)
        }
        Support::Real | Support::PositiveReal => {
            let (m, s) = match null {
                NullMeasure::Gaussian { mean, sd } => (*mean, *sd),
                _ => (1.0, 1.5),
            };
            let grid = |width: f64| {
                (0..=400).map(move |k| {
                    let y = m - width + 2.0 * width * k as f64 / 400.0;
                    if matches!(lik.support(), Support::PositiveReal) {
                        y.abs().max(1e-6)
                    } else {
                        y
                    }
                })
            };
            let inner = sup_over(&mut grid(10.0 * s));
            let outer = sup_over(&mut grid(40.0 * s));
            (inner, outer)
        }
    }
}

fn grows(inner: f64, outer: f64) -> bool {
    !outer.is_finite() || outer > 1.5 * inner + 1e-9
}

/// Checks the four regularity conditions on a grid.
pub fn validate_f0(pair: &LikelihoodPair) -> F0Report {
    let mut violations = Vec::new();
    for (which, lik) in [("g0", &pair.truth), ("g", &pair.pseudo)] {
        let mut push = |condition: F0Condition, detail: String, admissible: bool| {
            violations.push(Violation {
                condition,
                which,
                detail,
                admitted: admissible && pair.admits_unbounded_curvature,
            });
        };

        let mass = lik.reference_integral(|y| lik.logdensity(y, 0.0).exp(), 1.0);
        if lik.is_density() {
            if !((mass - 1.0).abs() <= 1e-6) {
                push(
                    F0Condition::Normalization,
                    format!("total mass {mass}"),
                    false,
                );
            }
        } else if !mass.is_finite() {
            push(
                F0Condition::Normalization,
                "integral diverges".into(),
                false,
            );
        }

        let m4 = pair.null.expect(|y| lik.d1(y, 0.0).powi(4));
        if !(m4.is_finite() && m4 < 1e12) {
            push(
                F0Condition::FourthMoment,
                format!("E₀|∂_w g|⁴ = {m4}"),
                false,
            );
        }

        let (inner, outer) = window_sups(lik, &pair.null, |y| lik.d2(y, 0.0));
        if grows(inner, outer) {
            push(
                F0Condition::CurvatureAtZero,
                format!("sup grows from {inner:.3e} to {outer:.3e}"),
                true,
            );
        }

        let (lo, hi) = lik.w_domain();
        let (a, b) = (lo.max(-0.5) * 0.5, hi.min(0.5) * 0.5);
        let mut inner3: f64 = 0.0;
        let mut outer3: f64 = 0.0;
        for k in 0..=10 {
            let w = a + (b - a) * k as f64 / 10.0;
            let (i3, o3) = window_sups(lik, &pair.null, |y| lik.d3(y, w));
            inner3 = inner3.max(i3);
            outer3 = outer3.max(o3);
        }
        if grows(inner3, outer3) {
            push(
                F0Condition::ThirdDerivative,
                format!("sup grows from {inner3:.3e} to {outer3:.3e}"),
                true,
            );
        }
    }
    let hard = violations.iter().any(|v| !v.admitted);
    let status = if hard {
        F0Status::Fail
    } else if violations.is_empty() {
        F0Status::Pass
    } else {
        F0Status::PassWithFlag
    };
    F0Report {
        pass: !hard,
        status,
        violations,
    }
}

// ---------------------------------------------------------------------------
// Objective

/// `Σ_{i≤j} [g(Y_ij, x_i x_j/√N) − g(Y_ij, 0)]`.
pub fn eval_pml_objective(pair: &LikelihoodPair, y: &SymMatrix, x: &[f64]) -> Result<f64> {
    let n = y.n();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let g = &pair.pseudo;
    let (lo, hi) = g.w_domain();
    let scale = 1.0 / (n as f64).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let row = y.row(i);
        for j in i..n {
            let w = x[i] * x[j] * scale;
            if w == 0.0 {
                continue;
            }
            if !(lo < w && w < hi) {
                return Err(Error::OutOfDomain { w, lo, hi });
            }
            total += g.logdensity(row[j], w) - g.logdensity(row[j], 0.0);
        }
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonIntegrable(format!("objective is {total}")))
    }
}

/// `P(Y = y | w)` for a discrete family.
pub fn probability(lik: &Likelihood, y: f64, w: f64) -> f64 {
    lik.logdensity(y, w).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(spec: &str) -> LikelihoodPair {
        builtin_from_spec(spec).unwrap()
    }

    #[test]
    fn gaussian_logdensity_value() {
        let p = pair("spiked_wigner:lambda=1,lambda0=1,c=0");
        let v = p.pseudo.logdensity(0.5, 0.0);
        assert!((v - (-0.125 - LN_SQRT_2PI)).abs() < 1e-15);
    }

    #[test]
    fn sbm_and_poisson_scores() {
        // y log(1/2 + μw) → μ/(1/2) = 2μ at w = 0
        let p = pair("sbm:mu=0.25");
        assert!((p.pseudo.d1(1.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((p.pseudo.d1(0.0, 0.0) + 0.5).abs() < 1e-15);
        let p = pair("poisson_bernoulli:lambda=2");
        assert!((p.pseudo.d1(3.0, 0.0) - 0.5).abs() < 1e-15);
        assert!((p.pseudo.d1(-3.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn objective_small_cases() {
        let p = pair("spiked_wigner:lambda=1");
        let y = SymMatrix::from_upper(1, |_, _| 2.0);
        assert!((eval_pml_objective(&p, &y, &[1.0]).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(eval_pml_objective(&p, &y, &[0.0]).unwrap(), 0.0);
        assert!(matches!(
            eval_pml_objective(&p, &y, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn objective_rejects_out_of_domain() {
        let p = pair("sbm:mu=0.45");
        let y = SymMatrix::from_upper(1, |_, _| 1.0);
        assert!(matches!(
            eval_pml_objective(&p, &y, &[1.5]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn parameter_space_parsing_and_projection() {
        let o: ParameterSpace = "[-1, 2]".parse().unwrap();
        assert_eq!(o.bound(), 2.0);
        assert_eq!(o.project(3.0), 2.0);
        let f: ParameterSpace = "{1,-1,1}".parse().unwrap();
        assert_eq!(f, ParameterSpace::pm_one());
        assert_eq!(f.constant_norm(), Some(1.0));
        assert_eq!(f.nearest(0.2), 1.0);
        assert!("{0,1}"
            .parse::<ParameterSpace>()
            .unwrap()
            .constant_norm()
            .is_none());
        assert!("(0,1)".parse::<ParameterSpace>().is_err());
    }

    #[test]
    fn registry_rejects_unknown_ids_and_params() {
        assert!(matches!(
            "nope".parse::<ModelId>(),
            Err(Error::UnknownModel(_))
        ));
        assert!(builtin(ModelId::Sbm, &ModelParams::parse("zeta=1").unwrap()).is_err());
        assert!(builtin(ModelId::Sbm, &ModelParams::parse("p=1.5").unwrap()).is_err());
        assert!(builtin(
            ModelId::PoissonBernoulli,
            &ModelParams::parse("lambda=-1").unwrap()
        )
        .is_err());
    }

    #[test]
    fn validator_outcomes() {
        assert_eq!(validate_f0(&pair("spiked_wigner")).status, F0Status::Pass);
        assert_eq!(validate_f0(&pair("sbm")).status, F0Status::Pass);
        assert_eq!(validate_f0(&pair("signed_wigner")).status, F0Status::Pass);
        let sq = validate_f0(&pair("squared_entries"));
        assert_eq!(sq.status, F0Status::Fail);
        assert!(sq
            .failing_conditions()
            .contains(&"∂²_w g(·,0) unbounded".to_string()));
        let po = validate_f0(&pair("poisson_bernoulli:lambda=2"));
        assert_eq!(po.status, F0Status::PassWithFlag);
        assert!(po.pass);
        assert!(po
            .violations
            .iter()
            .any(|v| v.condition == F0Condition::CurvatureAtZero));
    }
}
