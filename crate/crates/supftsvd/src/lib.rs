//! SupFTSVD: supervised low-rank decomposition of high-dimensional
//! multivariate functional data (subjects x features x continuous time).
//!
//! The model represents each subject's p-dimensional trajectory as a rank-r
//! sum of components, each the product of a subject loading (a covariate
//! effect plus a latent Gaussian deviation), a unit-norm feature-loading
//! vector and a unit-L2-norm singular function of time living in the
//! reproducing-kernel Hilbert space of rescaled Bernoulli polynomials.
//! Estimation is a penalized EM algorithm with closed-form M-steps; see the
//! [`em`] module. Prediction for new subjects, synthetic-data generation and
//! the evaluation criteria used by the simulation study live in [`inference`],
//! [`simulate`] and [`metrics`].

pub mod data;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod metrics;
mod parallel;
pub mod simulate;

pub use data::{clr_transform, filter_features, rescale_times, CountTable, Dataset, FilterRule, Subject};
pub use em::{fit, FitConfig, ModelFit};
pub use error::{Error, Result};
