//! Recursive lower bound for one online step, reported as a drift
//! diagnostic. Terms are evaluated exactly as displayed in the derivation,
//! so no sign or monotonicity guarantees are implied.

use nalgebra::DVector;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{ExpectedLoglik, VariationalState};
use crate::numstat::{log_mvgamma, mv_digamma, InvGammaParams};
use crate::vsugs::AllocProbs;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundBreakdown {
    pub tau_term: f64,
    pub sigma_term: f64,
    pub omega_terms: Vec<f64>,
    pub beta_terms: Vec<f64>,
    pub likelihood_term: f64,
    /// `Σ_j q̂_j log r_ij`
    pub alloc_prior_term: f64,
    /// `−Σ_j q̂_j log q̂_j`
    pub entropy_term: f64,
    pub total: f64,
}

/// Displayed difference `E log q_{i−1} − E log q_i` for an inverse-gamma
/// factor moving from `prev` to `new`.
pub fn ig_difference(prev: &InvGammaParams, new: &InvGammaParams) -> f64 {
    let (a0, b0) = (prev.shape, prev.rate);
    let (a1, b1) = (new.shape, new.rate);
    (a1 - a0) * digamma(a1) - ln_gamma(a1) + ln_gamma(a0) + a0 * (b0.ln() - b1.ln())
        + a1 * (b1 - b0) / b1
}

pub fn step_lower_bound(
    y: &DVector<f64>,
    e: &DVector<f64>,
    prev: &VariationalState,
    new: &VariationalState,
    alloc: &AllocProbs,
) -> Result<BoundBreakdown> {
    let t = new.trunc();
    let m = new.response_dim();
    let mf = m as f64;
    let d = new.design_dim();
    if prev.trunc() != t || prev.response_dim() != m || prev.design_dim() != d {
        return Err(Error::DimensionMismatch("states differ in shape".into()));
    }
    if alloc.probs.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "allocation has {} entries, expected {t}",
            alloc.probs.len()
        )));
    }

    let tau_term = ig_difference(&prev.tau, &new.tau);
    let omega_terms: Vec<f64> = prev
        .omegas
        .iter()
        .zip(&new.omegas)
        .map(|(p, n)| ig_difference(p, n))
        .collect();

    let (nu0, nu1) = (prev.sigma.dof, new.sigma.dof);
    let (s0, s1) = (&prev.sigma.scale, &new.sigma.scale);
    let ln2 = std::f64::consts::LN_2;
    let e_log_det = -mv_digamma(m, nu1 / 2.0)? - mf * ln2 + s1.log_det();
    let trace_prev = s1.solve_mat(s0.values()).trace() * nu1;
    let log_q_prev = 0.5 * nu0 * s0.log_det() - 0.5 * nu0 * mf * ln2 - log_mvgamma(m, nu0 / 2.0)?
        - 0.5 * trace_prev
        - 0.5 * (nu0 + mf + 1.0) * e_log_det;
    let log_q_new = 0.5 * nu1 * s1.log_det() - 0.5 * nu1 * mf * ln2 - log_mvgamma(m, nu1 / 2.0)?
        - 0.5 * mf * nu1
        - 0.5 * (nu1 + mf + 1.0) * e_log_det;
    let sigma_term = log_q_prev - log_q_new;

    let beta_terms: Vec<f64> = prev
        .components
        .iter()
        .zip(&new.components)
        .map(|(p, n)| {
            let delta = &n.beta_hat - &p.beta_hat;
            let quad = s1.solve_mat(&p.prec.sandwich(&delta)).trace() * nu1;
            let cross = n.prec.solve_mat(p.prec.values()).trace();
            // log|V⁻¹| = −log|V|
            -0.5 * mf * (-p.prec.log_det()) + 0.5 * mf * (-n.prec.log_det())
                - 0.5 * quad
                - 0.5 * mf * cross
                + 0.5 * mf * d as f64
        })
        .collect();

    let loglik = ExpectedLoglik::new(new)?;
    let mut likelihood_term = 0.0;
    let mut alloc_prior_term = 0.0;
    let mut entropy_term = 0.0;
    for j in 0..t {
        let q = alloc.probs[j];
        if q > 0.0 {
            likelihood_term += q * loglik.component(y, e, j);
            alloc_prior_term += q * alloc.prior_weights[j].ln();
            entropy_term -= q * q.ln();
        }
    }

    let total = tau_term
        + sigma_term
        + omega_terms.iter().sum::<f64>()
        + beta_terms.iter().sum::<f64>()
        + likelihood_term
        + alloc_prior_term
        + entropy_term;
    Ok(BoundBreakdown {
        tau_term,
        sigma_term,
        omega_terms,
        beta_terms,
        likelihood_term,
        alloc_prior_term,
        entropy_term,
        total,
    })
}
