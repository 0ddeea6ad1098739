//! Matrix-variate Dirichlet process mixture regression.
//!
//! Batch mean-field variational Bayes ([`batchvb`]), the one-pass online
//! fitter ([`vsugs`]), the posterior predictive t-mixture ([`predictive`]),
//! the quantile-residual regression adjustment ([`regadjust`]), a recursive
//! lower bound diagnostic ([`elbo`]) and the weakly-informative prior screen
//! ([`priorcheck`]).

pub mod basis;
pub mod batchvb;
pub mod data;
pub mod elbo;
pub mod energy;
pub mod error;
pub mod model;
pub mod numstat;
pub mod predictive;
pub mod priorcheck;
pub mod regadjust;
pub mod vsugs;

pub use error::{Error, Result};
