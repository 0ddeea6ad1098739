//! One-pass online fitting: each observation's allocation probabilities are
//! computed once from the current state and the state is then updated in
//! closed form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::batchvb::{fit_batch, omega_factors, BatchDiagnostics, BatchFit, BatchOptions};
use crate::elbo::{step_lower_bound, BoundBreakdown};
use crate::error::{Error, Result};
use crate::model::{init_state, Hyperparameters, VariationalState};
use crate::numstat::{log_mvgamma, log_sum_exp, SpdMatrix};

/// How the τ rate is carried from one observation to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauRateMode {
    /// Add the new observation's residual term to the previous rate.
    #[default]
    Accumulate,
    /// Re-evaluate the residual terms of every observation seen so far at
    /// the current parameters. Quadratic in the stream length.
    Recompute,
}

impl std::str::FromStr for TauRateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accumulate" => Ok(Self::Accumulate),
            "recompute" => Ok(Self::Recompute),
            other => Err(Error::InvalidParams(format!("unknown tau mode '{other}'"))),
        }
    }
}

/// Allocation probabilities for observation `i = seen + 1`. All vectors have
/// length `T`; entries beyond the candidate set are zero (or `−∞` for the
/// log marginals).
#[derive(Debug, Clone, PartialEq)]
pub struct AllocProbs {
    pub probs: DVector<f64>,
    pub log_marginals: DVector<f64>,
    /// Urn prior weights `r_ij`.
    pub prior_weights: DVector<f64>,
    pub candidates: usize,
}

/// Urn weights `r_ij` for observation `i = seen + 1`.
///
/// Components `j ≤ min(i−1, T)` get `(mass_j + α/T)/(α + i − 1)`; while
/// `i − 1 < T` the next index gets the new-cluster weight
/// `α(1 − (i−1)/T)/(α + i − 1)`.
pub fn urn_weights(masses: &[f64], seen: usize, alpha: f64) -> DVector<f64> {
    let t = masses.len();
    let tf = t as f64;
    let prev = seen as f64;
    let denom = alpha + prev;
    let mut w = DVector::zeros(t);
    for j in 0..seen.min(t) {
        w[j] = (masses[j] + alpha / tf) / denom;
    }
    if seen < t {
        w[seen] = alpha * (1.0 - prev / tf) / denom;
    }
    w
}

/// Log of the closed-form allocation integral for component `j`, with τ
/// replaced by its plug-in `1/E(τ⁻¹)`.
///
/// With `μ = E(τ⁻¹)`, `Λ = μEEᵀ + V_j` and `β̃ = Λ⁻¹(μEyᵀ + V_jβ̂_j)`, the
/// determinant argument `S + μyyᵀ + β̂ᵀV_jβ̂ − β̃ᵀΛβ̃` is evaluated through
/// the identical `S + c rrᵀ` with `c = μ/(1 + μEᵀV_j⁻¹E)`, `r = y − β̂ᵀE`.
pub fn component_marginal_loglik(
    y: &DVector<f64>,
    e: &DVector<f64>,
    state: &VariationalState,
    j: usize,
) -> Result<f64> {
    let comp = &state.components[j];
    let m = y.len();
    let mf = m as f64;
    let mu = state.tau.mean_inverse();
    let nu = state.sigma.dof;
    let lambda = comp.prec.rank_one_update(e, mu)?;
    let log_det_ratio = lambda.log_det() - comp.prec.log_det();
    let s = comp.prec.inv_quad(e);
    let c = mu / (1.0 + mu * s);
    let r = y - comp.beta_hat.tr_mul(e);
    let scale = &state.sigma.scale;
    let post = scale.rank_one_update(&r, c)?;
    Ok(-0.5 * mf * (2.0 * std::f64::consts::PI / mu).ln() - 0.5 * mf * log_det_ratio
        + 0.5 * nu * scale.log_det()
        + log_mvgamma(m, 0.5 * (nu + 1.0))?
        - log_mvgamma(m, 0.5 * nu)?
        + 0.5 * mf * std::f64::consts::LN_2
        - 0.5 * (nu + 1.0) * post.log_det())
}

/// Allocation probabilities `∝ r_ij · exp(component_marginal_loglik)` over
/// the candidate set `1..=min(i, T)`, normalized in log space.
pub fn alloc_probs(
    y: &DVector<f64>,
    e: &DVector<f64>,
    state: &VariationalState,
    alpha: f64,
) -> Result<AllocProbs> {
    let t = state.trunc();
    let candidates = (state.seen + 1).min(t);
    let prior_weights = urn_weights(&state.masses(), state.seen, alpha);
    let marginals: Vec<f64> = (0..candidates)
        .into_par_iter()
        .map(|j| component_marginal_loglik(y, e, state, j))
        .collect::<Result<_>>()?;
    let mut log_marginals = DVector::from_element(t, f64::NEG_INFINITY);
    let mut logs = Vec::with_capacity(candidates);
    for (j, lm) in marginals.iter().enumerate() {
        log_marginals[j] = *lm;
        logs.push(prior_weights[j].ln() + lm);
    }
    let mut probs = DVector::zeros(t);
    if state.seen == 0 {
        probs[0] = 1.0;
    } else {
        let lse = log_sum_exp(&logs);
        if !lse.is_finite() {
            return Err(Error::Domain(format!(
                "allocation probabilities are not finite at observation {}",
                state.seen + 1
            )));
        }
        for (j, l) in logs.iter().enumerate() {
            probs[j] = (l - lse).exp();
        }
        let s = probs.sum();
        probs /= s;
    }
    Ok(AllocProbs {
        probs,
        log_marginals,
        prior_weights,
        candidates,
    })
}

/// Sequential updater holding the state plus the diagonals of every `V_j⁻¹`,
/// which the ω update needs and which are maintained by Sherman–Morrison.
#[derive(Debug, Clone)]
pub struct OnlineFitter {
    hyper: Hyperparameters,
    state: VariationalState,
    inv_diags: Vec<DVector<f64>>,
    tau_mode: TauRateMode,
    // (y, E, q̂) for every observation, kept only in recompute mode.
    past: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl OnlineFitter {
    pub fn new(hyper: Hyperparameters, state: VariationalState, tau_mode: TauRateMode) -> Self {
        let inv_diags = state
            .components
            .iter()
            .map(|c| c.prec.inverse_diagonal())
            .collect();
        Self {
            hyper,
            state,
            inv_diags,
            tau_mode,
            past: Vec::new(),
        }
    }

    /// Start from a batch fit on a warm-up prefix. In recompute mode the
    /// prefix rows are remembered with their batch allocations.
    pub fn from_batch(
        hyper: Hyperparameters,
        fit: &BatchFit,
        e: &DMatrix<f64>,
        y: &DMatrix<f64>,
        tau_mode: TauRateMode,
    ) -> Self {
        let mut f = Self::new(hyper, fit.state.clone(), tau_mode);
        if tau_mode == TauRateMode::Recompute {
            for i in 0..fit.alloc.rows() {
                f.past.push((
                    y.row(i).transpose(),
                    e.row(i).transpose(),
                    fit.alloc.q.row(i).transpose(),
                ));
            }
        }
        f
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn into_state(self) -> VariationalState {
        self.state
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    /// Allocate and assimilate one observation.
    pub fn step(&mut self, y: &DVector<f64>, e: &DVector<f64>) -> Result<AllocProbs> {
        let probs = alloc_probs(y, e, &self.state, self.hyper.alpha)?;
        self.assimilate(y, e, &probs.probs)?;
        Ok(probs)
    }

    /// Assimilate one observation with given allocation probabilities `q̂`.
    pub fn assimilate(
        &mut self,
        y: &DVector<f64>,
        e: &DVector<f64>,
        q_hat: &DVector<f64>,
    ) -> Result<()> {
        let t = self.state.trunc();
        let m = self.state.response_dim();
        if q_hat.len() != t || y.len() != m || e.len() != self.state.design_dim() {
            return Err(Error::DimensionMismatch(format!(
                "step got q̂ {}, y {}, E {}; expected {t}, {m}, {}",
                q_hat.len(),
                y.len(),
                e.len(),
                self.state.design_dim()
            )));
        }
        let mu = self.state.tau.mean_inverse();
        let mut scale_inc = DMatrix::<f64>::zeros(m, m);
        for j in 0..t {
            let qj = q_hat[j];
            if qj == 0.0 {
                continue;
            }
            let c = mu * qj;
            let comp = &mut self.state.components[j];
            let u = comp.prec.solve(e);
            let s = e.dot(&u);
            let gain = c / (1.0 + c * s);
            let r = y - comp.beta_hat.tr_mul(e);
            comp.beta_hat += &u * r.transpose() * gain;
            comp.prec = comp.prec.rank_one_update(e, c)?;
            comp.mass += qj;
            scale_inc += &r * r.transpose() * gain;
            let diag = &mut self.inv_diags[j];
            for k in 0..diag.len() {
                diag[k] -= gain * u[k] * u[k];
            }
        }
        let sigma = &mut self.state.sigma;
        sigma.dof += 1.0;
        sigma.scale = SpdMatrix::new(crate::numstat::symmetrize(sigma.scale.values() + scale_inc))?;
        self.state.tau.shape += 0.5 * m as f64;
        match self.tau_mode {
            TauRateMode::Accumulate => {
                let term = residual_term(&self.state, y, e, q_hat);
                self.state.tau.rate += 0.5 * term;
            }
            TauRateMode::Recompute => {
                self.past.push((y.clone(), e.clone(), q_hat.clone()));
                let total: f64 = self
                    .past
                    .iter()
                    .map(|(yk, ek, qk)| residual_term(&self.state, yk, ek, qk))
                    .sum();
                self.state.tau.rate = self.hyper.tau_prior.rate + 0.5 * total;
            }
        }
        self.state.omegas = omega_factors(&self.state, &self.hyper, &self.inv_diags);
        self.state.seen += 1;
        Ok(())
    }
}

/// `Σ_j q̂_j [rᵀ νS⁻¹ r + m EᵀV_j⁻¹E]` at the current parameters.
fn residual_term(
    state: &VariationalState,
    y: &DVector<f64>,
    e: &DVector<f64>,
    q_hat: &DVector<f64>,
) -> f64 {
    let m = y.len() as f64;
    let nu = state.sigma.dof;
    state
        .components
        .iter()
        .zip(q_hat.iter())
        .filter(|(_, q)| **q != 0.0)
        .map(|(c, q)| {
            let r = y - c.beta_hat.tr_mul(e);
            q * (nu * state.sigma.scale.inv_quad(&r) + m * c.prec.inv_quad(e))
        })
        .sum()
}

/// Stateless single update: builds a fitter, assimilates, returns the state.
pub fn assimilate_one(
    y: &DVector<f64>,
    e: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
    q_hat: &DVector<f64>,
) -> Result<VariationalState> {
    let mut f = OnlineFitter::new(hyper.clone(), state.clone(), TauRateMode::Accumulate);
    f.assimilate(y, e, q_hat)?;
    Ok(f.into_state())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineOptions {
    pub warm_count: usize,
    pub batch: BatchOptions,
    pub tau_mode: TauRateMode,
    pub track_bound: bool,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            warm_count: 0,
            batch: BatchOptions::default(),
            tau_mode: TauRateMode::Accumulate,
            track_bound: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFit {
    pub state: VariationalState,
    /// `n × T`: batch allocations for the warm-up rows, then the online `q̂`.
    pub allocations: DMatrix<f64>,
    pub warm_diagnostics: Option<BatchDiagnostics>,
    /// Per-step lower bound, when tracked.
    pub bounds: Vec<BoundBreakdown>,
}

/// Batch fit on the first `warm_count` rows, then one pass over the rest in
/// arrival order.
pub fn fit_online(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    hyper: &Hyperparameters,
    opts: OnlineOptions,
) -> Result<OnlineFit> {
    let n = e.nrows();
    if y.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} design rows but {} response rows",
            y.nrows()
        )));
    }
    if opts.warm_count > n {
        return Err(Error::InvalidParams(format!(
            "warm count {} exceeds {n} observations",
            opts.warm_count
        )));
    }
    hyper.validate(y.ncols())?;
    let t = hyper.trunc;
    let mut allocations = DMatrix::zeros(n, t);
    let warm = opts.warm_count;
    let (mut fitter, warm_diagnostics) = if warm > 0 {
        let ew = e.rows(0, warm).into_owned();
        let yw = y.rows(0, warm).into_owned();
        let fit = fit_batch(&ew, &yw, hyper, opts.batch)?;
        allocations.rows_mut(0, warm).copy_from(&fit.alloc.q);
        let f = OnlineFitter::from_batch(hyper.clone(), &fit, &ew, &yw, opts.tau_mode);
        (f, Some(fit.diagnostics))
    } else {
        (
            OnlineFitter::new(hyper.clone(), init_state(hyper)?, opts.tau_mode),
            None,
        )
    };
    let mut bounds = Vec::new();
    for i in warm..n {
        let yi = y.row(i).transpose();
        let ei = e.row(i).transpose();
        let prev = opts.track_bound.then(|| fitter.state().clone());
        let probs = fitter.step(&yi, &ei)?;
        if let Some(prev) = prev {
            bounds.push(step_lower_bound(&yi, &ei, &prev, fitter.state(), &probs)?);
        }
        allocations.set_row(i, &probs.probs.transpose());
    }
    Ok(OnlineFit {
        state: fitter.into_state(),
        allocations,
        warm_diagnostics,
        bounds,
    })
}
