//! Latent signals and observation matrices.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::likelihoods::{LikelihoodPair, ParameterSpace};
use crate::linalg::SymMatrix;
use crate::quadrature::GaussHermite;
use crate::rng::stream_rng;
use crate::special::{norm_cdf, norm_pdf};

/// Stream reserved for signal draws; matrix rows use streams `0..N`.
const SIGNAL_STREAM: u64 = u64::MAX - 1;

/// Finitely supported law ℚ of a signal coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalLaw {
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SignalLaw {
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(invalid(
                "law",
                "atoms and weights must be nonempty and aligned",
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(invalid("law", "weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("law", "weights must not all vanish"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { atoms, weights })
    }

    pub fn point(x: f64) -> Self {
        Self {
            atoms: vec![x],
            weights: vec![1.0],
        }
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| w * f(a))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.expect(|x| x)
    }

    pub fn second_moment(&self) -> f64 {
        self.expect(|x| x * x)
    }

    /// Invariant under `x → −x`.
    pub fn is_symmetric(&self) -> bool {
        self.atoms.iter().zip(&self.weights).all(|(&a, &w)| {
            self.atoms
                .iter()
                .zip(&self.weights)
                .any(|(&b, &v)| (a + b).abs() < 1e-12 && (w - v).abs() < 1e-12)
        })
    }
}

/// Generator of i.i.d. signal coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum SignalEnsemble {
    Rademacher,
    /// Values in {−1, 0, 1} with `P(±1) = p/2`.
    Sparse {
        p: f64,
    },
    /// Values in {0, 1} with `P(1) = rho`.
    Bernoulli {
        rho: f64,
    },
    Constant {
        c: f64,
    },
    /// I.i.d. from a finitely supported law.
    Law(SignalLaw),
    /// `N(0, sd²)` clipped to `[−clip, clip]`.
    ClippedGaussian {
        sd: f64,
        clip: f64,
    },
}

impl SignalEnsemble {
    pub fn rademacher() -> Self {
        Self::Rademacher
    }

    pub fn sparse(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(invalid("p", "sparsity must lie in (0, 1]"));
        }
        Ok(Self::Sparse { p })
    }

    pub fn bernoulli(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(invalid("rho", "must lie in (0, 1]"));
        }
        Ok(Self::Bernoulli { rho })
    }

    /// Gaussian with the default clipping level of six standard deviations.
    pub fn gaussian(sd: f64) -> Result<Self> {
        Self::clipped_gaussian(sd, 6.0 * sd)
    }

    pub fn clipped_gaussian(sd: f64, clip: f64) -> Result<Self> {
        if !(sd > 0.0 && clip > 0.0) {
            return Err(invalid("clip", "sd and clip must be positive"));
        }
        Ok(Self::ClippedGaussian { sd, clip })
    }

    /// `(E_ℚ x⁰, E_ℚ (x⁰)²)`.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            Self::Rademacher => (0.0, 1.0),
            Self::Sparse { p } => (0.0, *p),
            Self::Bernoulli { rho } => (*rho, *rho),
            Self::Constant { c } => (*c, c * c),
            Self::Law(law) => (law.mean(), law.second_moment()),
            Self::ClippedGaussian { sd, clip } => {
                let k = clip / sd;
                let tail = 1.0 - norm_cdf(k);
                let inner = 2.0 * norm_cdf(k) - 1.0 - 2.0 * k * norm_pdf(k);
                (0.0, sd * sd * (inner + 2.0 * k * k * tail))
            }
        }
    }

    /// Support Ω₀ of the coordinates.
    pub fn support(&self) -> ParameterSpace {
        match self {
            Self::Rademacher => ParameterSpace::pm_one(),
            Self::Sparse { .. } => ParameterSpace::Finite(vec![-1.0, 0.0, 1.0]),
            Self::Bernoulli { .. } => ParameterSpace::Finite(vec![0.0, 1.0]),
            Self::Constant { c } => ParameterSpace::Finite(vec![*c]),
            Self::Law(law) => {
                ParameterSpace::finite(law.atoms.iter().copied()).expect("law atoms are finite")
            }
            Self::ClippedGaussian { clip, .. } => ParameterSpace::Interval {
                lo: -clip,
                hi: *clip,
            },
        }
    }

    /// The limiting law ℚ; continuous ensembles are discretized by Gauss–Hermite nodes.
    pub fn law(&self) -> SignalLaw {
        match self {
            Self::Rademacher => SignalLaw {
                atoms: vec![-1.0, 1.0],
                weights: vec![0.5, 0.5],
            },
            Self::Sparse { p } => SignalLaw {
                atoms: vec![-1.0, 0.0, 1.0],
                weights: vec![p / 2.0, 1.0 - p, p / 2.0],
            },
            Self::Bernoulli { rho } => SignalLaw {
                atoms: vec![0.0, 1.0],
                weights: vec![1.0 - rho, *rho],
            },
            Self::Constant { c } => SignalLaw::point(*c),
            Self::Law(law) => law.clone(),
            Self::ClippedGaussian { sd, clip } => {
                let gh = GaussHermite::new(21);
                SignalLaw {
                    atoms: gh
                        .nodes
                        .iter()
                        .map(|z| (sd * z).clamp(-clip, *clip))
                        .collect(),
                    weights: gh.weights.clone(),
                }
            }
        }
    }

    fn draw(&self, rng: &mut crate::rng::Rng) -> f64 {
        match self {
            Self::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Self::Sparse { p } => {
                let u: f64 = rng.random();
                if u < p / 2.0 {
                    1.0
                } else if u < *p {
                    -1.0
                } else {
                    0.0
                }
            }
            Self::Bernoulli { rho } => {
                if rng.random::<f64>() < *rho {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Constant { c } => *c,
            Self::Law(law) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (a, w) in law.atoms.iter().zip(&law.weights) {
                    acc += w;
                    if u < acc {
                        return *a;
                    }
                }
                law.atoms[law.atoms.len() - 1]
            }
            Self::ClippedGaussian { sd, clip } => {
                let z: f64 = StandardNormal.sample(rng);
                (sd * z).clamp(-clip, *clip)
            }
        }
    }
}

impl fmt::Display for SignalEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rademacher => write!(f, "rademacher"),
            Self::Sparse { p } => write!(f, "sparse({p})"),
            Self::Bernoulli { rho } => write!(f, "bernoulli({rho})"),
            Self::Constant { c } => write!(f, "constant({c})"),
            Self::Law(law) => {
                let parts: Vec<String> = law
                    .atoms
                    .iter()
                    .zip(&law.weights)
                    .map(|(a, w)| format!("{a}@{w}"))
                    .collect();
                write!(f, "law({})", parts.join(";"))
            }
            Self::ClippedGaussian { sd, clip } => write!(f, "gaussian({sd},{clip})"),
        }
    }
}

impl FromStr for SignalEnsemble {
    type Err = Error;

    /// `rademacher`, `sparse(p)`, `bernoulli(rho)`, `constant(c)`,
    /// `gaussian(sd[,clip])`, `law(a@w;b@v;...)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(k) if s.ends_with(')') => (&s[..k], &s[k + 1..s.len() - 1]),
            _ => (s, ""),
        };
        let nums = |a: &str| -> Result<Vec<f64>> {
            a.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| invalid("signal", format!("bad number `{t}`")))
                })
                .collect()
        };
        let one = |a: &str| -> Result<f64> {
            let v = nums(a)?;
            v.first()
                .copied()
                .ok_or_else(|| invalid("signal", format!("`{s}` needs an argument")))
        };
        match head {
            "rademacher" => Ok(Self::Rademacher),
            "sparse" => Self::sparse(one(args)?),
            "bernoulli" => Self::bernoulli(one(args)?),
            "constant" => Ok(Self::Constant { c: one(args)? }),
            "gaussian" | "clipped-gaussian" | "clipped-subgaussian" => {
                let v = nums(args)?;
                let sd = v.first().copied().unwrap_or(1.0);
                let clip = v.get(1).copied().unwrap_or(6.0 * sd);
                Self::clipped_gaussian(sd, clip)
            }
            "law" => {
                let mut atoms = Vec::new();
                let mut weights = Vec::new();
                for item in args.split(';').filter(|t| !t.trim().is_empty()) {
                    let (a, w) = item
                        .split_once('@')
                        .ok_or_else(|| invalid("signal", "law items are atom@weight"))?;
                    atoms.push(one(a)?);
                    weights.push(one(w)?);
                }
                Ok(Self::Law(SignalLaw::new(atoms, weights)?))
            }
            _ => Err(invalid("signal", format!("unknown ensemble `{s}`"))),
        }
    }
}

/// I.i.d. draws of length `n`, deterministic in `seed`.
pub fn sample_signal(ens: &SignalEnsemble, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    (0..n).map(|_| ens.draw(&mut rng)).collect()
}

/// Symmetric observations with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix {
    pub entries: SymMatrix,
    pub model: String,
    pub signal: Vec<f64>,
    pub seed: u64,
}

impl ObservationMatrix {
    pub fn n(&self) -> usize {
        self.entries.n()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SampleOptions {
    /// Gaussian families only: diagonal noise with variance 2 instead of 1.
    pub double_diagonal_variance: bool,
}

/// Samples `Y | x⁰` entrywise with `w = x_i x_j/√N`, diagonal included.
pub fn sample_matrix(pair: &LikelihoodPair, x0: &[f64], seed: u64) -> Result<ObservationMatrix> {
    sample_matrix_with(pair, x0, seed, SampleOptions::default())
}

pub fn sample_matrix_with(
    pair: &LikelihoodPair,
    x0: &[f64],
    seed: u64,
    opts: SampleOptions,
) -> Result<ObservationMatrix> {
    let n = x0.len();
    if n == 0 {
        return Err(invalid("n", "signal must be nonempty"));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let rows: Result<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            (i..n)
                .map(|j| {
                    let w = x0[i] * x0[j] * scale;
                    let lik = match (&pair.truth, i == j && opts.double_diagonal_variance) {
                        (
                            crate::likelihoods::Likelihood::Gaussian {
                                slope,
                                offset,
                                variance,
                            },
                            true,
                        ) => crate::likelihoods::Likelihood::Gaussian {
                            slope: *slope,
                            offset: *offset,
                            variance: 2.0 * variance,
                        },
                        (l, _) => l.clone(),
                    };
                    lik.sample(w, &mut rng).map_err(|e| match e {
                        Error::ProbabilityOutOfRange { p, .. } => {
                            Error::ProbabilityOutOfRange { p, i, j }
                        }
                        other => other,
                    })
                })
                .collect()
        })
        .collect();
    Ok(ObservationMatrix {
        entries: SymMatrix::from_upper_rows(n, rows?),
        model: pair.name.clone(),
        signal: x0.to_vec(),
        seed,
    })
}

const MAGIC: &[u8; 4] = b"R1PM";
const FORMAT_VERSION: u32 = 2;

/// Binary layout: magic, version (u32), n (u32), model id (u32 length +
/// UTF-8), seed (u64), the row-major upper triangle as f64, then the signal
/// (u32 length + f64 values), all little-endian. Version 1 files lack the
/// signal.
pub fn write_binary(obs: &ObservationMatrix, mut out: impl Write) -> Result<()> {
    let n = obs.n();
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(n as u32).to_le_bytes())?;
    let id = obs.model.as_bytes();
    out.write_all(&(id.len() as u32).to_le_bytes())?;
    out.write_all(id)?;
    out.write_all(&obs.seed.to_le_bytes())?;
    let mut buf = Vec::with_capacity(n * (n + 1) / 2 * 8);
    for i in 0..n {
        for &v in &obs.entries.row(i)[i..] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.write_all(&(obs.signal.len() as u32).to_le_bytes())?;
    for v in &obs.signal {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a matrix written by [`write_binary`]; version 1 files come back
/// with an empty signal.
pub fn read_binary(mut input: impl Read) -> Result<ObservationMatrix> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version == 0 || version > FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    input.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    input.read_exact(&mut u32buf)?;
    let len = u32::from_le_bytes(u32buf) as usize;
    let mut id = vec![0u8; len];
    input.read_exact(&mut id)?;
    let model = String::from_utf8(id).map_err(|_| Error::Format("model id is not UTF-8".into()))?;
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let seed = u64::from_le_bytes(u64buf);
    let mut entries = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            input.read_exact(&mut u64buf)?;
            entries.set(i, j, f64::from_le_bytes(u64buf));
        }
    }
    let mut signal = Vec::new();
    if version >= 2 {
        input.read_exact(&mut u32buf)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        if len != 0 && len != n {
            return Err(Error::Format(format!("signal of length {len} for n = {n}")));
        }
        signal.reserve(len);
        for _ in 0..len {
            input.read_exact(&mut u64buf)?;
            signal.push(f64::from_le_bytes(u64buf));
        }
    }
    Ok(ObservationMatrix {
        entries,
        model,
        signal,
        seed,
    })
}

/// Full matrix as CSV rows.
pub fn write_csv(obs: &ObservationMatrix, mut out: impl Write) -> Result<()> {
    for i in 0..obs.n() {
        let row: Vec<String> = obs.entries.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
