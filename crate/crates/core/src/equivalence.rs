//! Strong and coarse equivalence of inference tasks, and the universal task
//! realizing any information parameters.

use std::fmt;

use crate::datagen::SignalEnsemble;
use crate::error::{invalid, Error, Result};
use crate::info_params::{InfoParams, ScoreClass, DEFAULT_CLASSIFY_TOL};
use crate::likelihoods::{Likelihood, LikelihoodPair, ParameterSpace};

pub const RATIO_REL_TOL: f64 = 1e-6;

pub fn strongly_equivalent(a: &InfoParams, b: &InfoParams, tol: f64) -> bool {
    a.betas()
        .iter()
        .zip(b.betas())
        .all(|(x, y)| (x - y).abs() <= tol)
}

/// Which sufficient condition for coarse equivalence holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoarseCondition {
    /// Every compared ratio agrees.
    RatioAll,
    /// Ω has constant norm and the ratios other than the curvature agree.
    ConstantNormRatio12,
    None,
}

impl fmt::Display for CoarseCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RatioAll => "ratio_all",
            Self::ConstantNormRatio12 => "constant_norm_ratio12",
            Self::None => "none",
        })
    }
}

/// A component ratio `a_i / b_i`; `None` when both vanish.
pub type Ratio = Option<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub strong: bool,
    /// Condition on the ratios `β₁ : β₂ : β₃ [: β₄ : α]`.
    pub coarse_sufficient: CoarseCondition,
    /// The same test with `√β₁` in place of `β₁` (the disorder coefficient
    /// of the Gaussian-equivalent Hamiltonian).
    pub coarse_sufficient_sqrt_beta1: CoarseCondition,
    /// Labels of the compared components, aligned with `ratios`.
    pub labels: Vec<&'static str>,
    pub ratios: Vec<Ratio>,
    pub notes: Vec<String>,
}

fn ratio(index: usize, num: f64, den: f64) -> Result<Ratio> {
    let scale = num.abs().max(den.abs());
    if scale == 0.0 || (num.abs() <= f64::EPSILON * scale && den.abs() <= f64::EPSILON * scale) {
        return Ok(None);
    }
    if den == 0.0 {
        return Err(Error::Incomparable { index, num, den });
    }
    Ok(Some(num / den))
}

/// All present ratios agree to relative `RATIO_REL_TOL`; `None` entries match anything.
fn ratios_agree(ratios: &[Ratio]) -> bool {
    let present: Vec<f64> = ratios.iter().flatten().copied().collect();
    present
        .windows(2)
        .all(|w| (w[0] - w[1]).abs() <= RATIO_REL_TOL * w[0].abs().max(w[1].abs()))
}

fn condition(ratios: &[Ratio], curvature_index: usize, constant_norm: bool) -> CoarseCondition {
    if ratios_agree(ratios) {
        return CoarseCondition::RatioAll;
    }
    let without: Vec<Ratio> = ratios
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != curvature_index)
        .map(|(_, r)| *r)
        .collect();
    if constant_norm && ratios_agree(&without) {
        CoarseCondition::ConstantNormRatio12
    } else {
        CoarseCondition::None
    }
}

/// Checks the sufficient conditions for coarse equivalence. Ill-scored tasks
/// are compared through their correction parameters `alpha_a`, `alpha_b`.
pub fn coarse_sufficient(
    a: &InfoParams,
    b: &InfoParams,
    omega: &ParameterSpace,
    alpha_a: Option<f64>,
    alpha_b: Option<f64>,
) -> Result<EquivalenceReport> {
    let class_a = a.classify(DEFAULT_CLASSIFY_TOL);
    let class_b = b.classify(DEFAULT_CLASSIFY_TOL);
    let well_a = class_a == ScoreClass::WellScored;
    let well_b = class_b == ScoreClass::WellScored;
    if well_a != well_b {
        return Err(Error::ClassMismatch(format!("{class_a} vs {class_b}")));
    }
    let mut labels = vec!["beta1", "beta2", "beta3"];
    let mut nums = vec![a.beta1, a.beta2, a.beta3];
    let mut dens = vec![b.beta1, b.beta2, b.beta3];
    let mut notes = Vec::new();
    if !well_a {
        let (Some(x), Some(y)) = (alpha_a, alpha_b) else {
            return Err(invalid(
                "alpha",
                "ill-scored tasks need correction parameters on both sides",
            ));
        };
        labels.extend(["beta4", "alpha"]);
        nums.extend([a.beta4, x]);
        dens.extend([b.beta4, y]);
    } else if alpha_a.is_some() || alpha_b.is_some() {
        notes.push("correction parameters ignored for well-scored tasks".into());
    }
    let ratios = nums
        .iter()
        .zip(&dens)
        .enumerate()
        .map(|(k, (&n, &d))| ratio(k, n, d))
        .collect::<Result<Vec<_>>>()?;
    let mut sqrt_ratios = ratios.clone();
    sqrt_ratios[0] = ratio(0, a.beta1.max(0.0).sqrt(), b.beta1.max(0.0).sqrt())?;

    let constant_norm = omega.constant_norm().is_some();
    let coarse = condition(&ratios, 2, constant_norm);
    let coarse_sqrt = condition(&sqrt_ratios, 2, constant_norm);
    if coarse != coarse_sqrt {
        notes.push(format!(
            "β₁-ratio test gives {coarse}, √β₁-ratio test gives {coarse_sqrt}"
        ));
    }
    let strong = strongly_equivalent(a, b, 1e-6);
    if strong && coarse == CoarseCondition::None {
        notes.push("strongly equivalent although no ratio condition fired".into());
    }
    Ok(EquivalenceReport {
        strong,
        coarse_sufficient: if strong && coarse == CoarseCondition::None {
            CoarseCondition::RatioAll
        } else {
            coarse
        },
        coarse_sufficient_sqrt_beta1: coarse_sqrt,
        labels,
        ratios,
        notes,
    })
}

/// Gaussian task with information parameters `ip`: data `N(β₂w + β₄, β₁)`,
/// pseudo-likelihood `−½(y − w)² − ((β₃ − 1)/2)w²`.
pub fn universal_task(ip: &InfoParams) -> Result<LikelihoodPair> {
    if !(ip.beta1 > 0.0) {
        return Err(invalid(
            "beta1",
            "universal task needs a positive score variance",
        ));
    }
    LikelihoodPair::new(
        format!(
            "universal(b1={},b2={},b3={},b4={})",
            ip.beta1, ip.beta2, ip.beta3, ip.beta4
        ),
        Likelihood::Gaussian {
            slope: ip.beta2,
            offset: ip.beta4,
            variance: ip.beta1,
        },
        Likelihood::RidgedGaussian {
            curvature: ip.beta3,
        },
        ParameterSpace::pm_one(),
        SignalEnsemble::rademacher(),
    )
}

/// Well-scored variant with pseudo-likelihood `−½(y − √β₃ w)²`; the data law
/// becomes `N(β₂w/√β₃, β₁/β₃)` so that all four parameters are preserved.
pub fn universal_task_sqrt_curvature(ip: &InfoParams) -> Result<LikelihoodPair> {
    if !(ip.beta1 > 0.0) {
        return Err(invalid(
            "beta1",
            "universal task needs a positive score variance",
        ));
    }
    if !(ip.beta3 > 0.0) {
        return Err(invalid(
            "beta3",
            "the square-root form needs positive curvature",
        ));
    }
    if ip.beta4 != 0.0 {
        return Err(invalid(
            "beta4",
            "the square-root form is only available for well-scored tasks",
        ));
    }
    let root = ip.beta3.sqrt();
    LikelihoodPair::new(
        format!(
            "universal-sqrt(b1={},b2={},b3={})",
            ip.beta1, ip.beta2, ip.beta3
        ),
        Likelihood::Gaussian {
            slope: ip.beta2 / root,
            offset: 0.0,
            variance: ip.beta1 / ip.beta3,
        },
        Likelihood::Gaussian {
            slope: root,
            offset: 0.0,
            variance: 1.0,
        },
        ParameterSpace::pm_one(),
        SignalEnsemble::rademacher(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info_params::{compute, Method};

    fn b(v: [f64; 4]) -> InfoParams {
        InfoParams::from_betas(v[0], v[1], v[2], v[3])
    }

    #[test]
    fn strong() {
        assert!(strongly_equivalent(
            &b([1.0, 1.0, 1.0, 0.0]),
            &b([1.0, 1.0, 1.0, 0.0]),
            1e-9
        ));
        assert!(!strongly_equivalent(
            &b([1.0, 1.0, 1.0, 0.0]),
            &b([1.0, 1.0, 1.0, 0.1]),
            1e-9
        ));
    }

    #[test]
    fn coarse_conditions() {
        let ball = ParameterSpace::interval(-1.0, 1.0).unwrap();
        let cube = ParameterSpace::pm_one();
        let r = coarse_sufficient(
            &b([1.0, 1.0, 1.0, 0.0]),
            &b([2.0, 2.0, 2.0, 0.0]),
            &ball,
            None,
            None,
        )
        .unwrap();
        assert_eq!(r.coarse_sufficient, CoarseCondition::RatioAll);
        let r = coarse_sufficient(
            &b([1.0, 1.0, 4.0, 0.0]),
            &b([2.0, 2.0, 5.0, 0.0]),
            &cube,
            None,
            None,
        )
        .unwrap();
        assert_eq!(r.coarse_sufficient, CoarseCondition::ConstantNormRatio12);
        let r = coarse_sufficient(
            &b([1.0, 1.0, 1.0, 0.0]),
            &b([2.0, 2.0, 3.0, 0.0]),
            &ball,
            None,
            None,
        )
        .unwrap();
        assert_eq!(r.coarse_sufficient, CoarseCondition::None);
    }

    #[test]
    fn zero_over_zero_is_a_wildcard_and_x_over_zero_is_an_error() {
        let ball = ParameterSpace::interval(-1.0, 1.0).unwrap();
        let r = coarse_sufficient(
            &b([1.0, 0.0, 1.0, 0.0]),
            &b([3.0, 0.0, 3.0, 0.0]),
            &ball,
            None,
            None,
        )
        .unwrap();
        assert_eq!(r.coarse_sufficient, CoarseCondition::RatioAll);
        assert_eq!(r.ratios[1], None);
        let e = coarse_sufficient(
            &b([1.0, 1.0, 1.0, 0.0]),
            &b([1.0, 0.0, 1.0, 0.0]),
            &ball,
            None,
            None,
        );
        assert!(matches!(e, Err(Error::Incomparable { index: 1, .. })));
    }

    #[test]
    fn ill_scored_needs_alphas() {
        let cube = ParameterSpace::pm_one();
        assert!(coarse_sufficient(
            &b([1.0, 1.0, 1.0, 0.5]),
            &b([2.0, 2.0, 2.0, 1.0]),
            &cube,
            None,
            None
        )
        .is_err());
        let r = coarse_sufficient(
            &b([1.0, 1.0, 1.0, 0.5]),
            &b([2.0, 2.0, 2.0, 1.0]),
            &cube,
            Some(0.3),
            Some(0.6),
        )
        .unwrap();
        assert_eq!(r.coarse_sufficient, CoarseCondition::RatioAll);
        assert!(matches!(
            coarse_sufficient(
                &b([1.0, 1.0, 1.0, 0.5]),
                &b([1.0, 1.0, 1.0, 0.0]),
                &cube,
                Some(1.0),
                Some(1.0)
            ),
            Err(Error::ClassMismatch(_))
        ));
    }

    #[test]
    fn round_trips() {
        for v in [
            [1.0, 1.0, 1.0, 0.0],
            [1.0, 2.0, 1.0, 0.0],
            [2.0, 1.0, 3.0, 0.5],
        ] {
            let got = compute(&universal_task(&b(v)).unwrap(), &Method::Quadrature).unwrap();
            assert!(
                strongly_equivalent(&got, &b(v), 1e-9),
                "{v:?} -> {:?}",
                got.betas()
            );
        }
        let got = compute(
            &universal_task_sqrt_curvature(&b([1.5, 0.7, 2.0, 0.0])).unwrap(),
            &Method::Quadrature,
        )
        .unwrap();
        assert!(
            strongly_equivalent(&got, &b([1.5, 0.7, 2.0, 0.0]), 1e-9),
            "{:?}",
            got.betas()
        );
        assert!(universal_task(&b([0.0, 1.0, 1.0, 0.0])).is_err());
    }
}
