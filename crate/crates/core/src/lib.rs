//! Weighted multi-source direct learning of conditional average treatment
//! effects.
//!
//! Several independent data sources share a covariate block `X`; each may
//! also carry its own covariates `Z_s`. The direct learner regresses the
//! pseudo-outcome `A * (Y - m_s(X, Z_s))` on `X` by weighted least squares,
//! where each row's weight combines an inverse treatment propensity with a
//! source weight built from a density-ratio (transfer) term and an
//! efficiency (information) term. The target is the treatment effect
//! function `delta(X)`, half the CATE.
//!
//! Modules follow the pipeline: [`data`] → [`learners`] → [`nuisance`] →
//! [`weighting`] → [`estimators`] → [`evaluation`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod learners;
pub mod matrix;
pub mod nuisance;
pub mod parallel;
pub mod rng;
pub mod weighting;

pub use error::{Result, WmdlError};
pub use matrix::Matrix;
