//! Pseudo-maximum-likelihood estimation for rank-one spiked matrix models.
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod enumerate;
pub mod equivalence;
pub mod error;
pub mod estimators;
pub mod gaussian_equiv;
pub mod harness;
pub mod info_params;
pub mod likelihoods;
pub mod linalg;
pub mod optimize;
pub mod parisi;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod theory;

pub use datagen::{ObservationMatrix, SignalEnsemble, SignalLaw};
pub use error::{Error, Result};
pub use estimators::{EstimateResult, EstimatorId, Init};
pub use info_params::{InfoParams, ScoreClass};
pub use likelihoods::{
    builtin, builtin_from_spec, Likelihood, LikelihoodPair, ModelId, ModelParams, ParameterSpace,
};
pub use linalg::SymMatrix;
