//! Batch mean-field coordinate ascent under the truncated Pólya-urn prior.
//!
//! Each sweep runs [`update_global`], [`update_tau`], [`update_omega`] and
//! [`update_delta`] in that order. Data enter as an `n × (N+1)` design matrix
//! (row `i` is `E_iᵀ`) and an `n × m` response matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    init_state, AllocationTable, ComponentState, ExpectedLoglik, Hyperparameters,
    VariationalState,
};
use crate::numstat::{log_sum_exp, seeded_rng, InvGammaParams, InvWishartParams, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchDiagnostics {
    /// Largest scaled parameter change `|new − old| / (1 + |old|)` per sweep.
    pub max_change: Vec<f64>,
    pub converged: bool,
}

impl BatchDiagnostics {
    pub fn iterations(&self) -> usize {
        self.max_change.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchFit {
    pub state: VariationalState,
    pub alloc: AllocationTable,
    pub diagnostics: BatchDiagnostics,
}

fn check_data(e: &DMatrix<f64>, y: &DMatrix<f64>, h: &Hyperparameters) -> Result<()> {
    if e.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} design rows but {} response rows",
            e.nrows(),
            y.nrows()
        )));
    }
    if e.ncols() != h.design_dim() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} columns, expected {}",
            e.ncols(),
            h.design_dim()
        )));
    }
    if y.ncols() != h.response_dim() {
        return Err(Error::DimensionMismatch(format!(
            "responses have {} columns, expected {}",
            y.ncols(),
            h.response_dim()
        )));
    }
    Ok(())
}

fn component_prior_prec(omega_inv: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(omega_inv) + c
}

/// Residuals `y_i − β̂ᵀE_i` stacked as rows.
fn residuals(e: &DMatrix<f64>, y: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    y - e * beta
}

/// Updates every `(β̂_j, V_j)` and then `(ν̂, Ŝ)`.
///
/// The scale update uses the equivalent residual form
/// `S + Σ_j [μ Σ_i q_ij r_ij r_ijᵀ + (β̂_j − M_j)ᵀ P_j (β̂_j − M_j)]`
/// with `P_j = E(Ω⁻¹) + C_j`, which never subtracts two large matrices.
pub fn update_global(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    q: &AllocationTable,
    state: &mut VariationalState,
    h: &Hyperparameters,
) -> Result<()> {
    check_data(e, y, h)?;
    let ex = state.expectations();
    let mu = ex.tau_inv;
    let n = e.nrows();
    let updated: Vec<(ComponentState, DMatrix<f64>)> = (0..h.trunc)
        .into_par_iter()
        .map(|j| {
            let w = q.q.column(j);
            let p = component_prior_prec(&ex.omega_inv, &h.prior_precs[j]);
            let m_j = &h.prior_means[j];
            let mass = w.sum();
            if mass == 0.0 {
                let prec = SpdMatrix::new(p)?;
                let zero = DMatrix::zeros(y.ncols(), y.ncols());
                return Ok((
                    ComponentState {
                        beta_hat: m_j.clone(),
                        prec,
                        mass,
                    },
                    zero,
                ));
            }
            let mut ew = e.clone();
            for (i, mut row) in ew.row_iter_mut().enumerate() {
                row *= w[i];
            }
            let gram = e.tr_mul(&ew) * mu;
            let prec = SpdMatrix::new(crate::numstat::symmetrize(&p + gram))?;
            let rhs = &p * m_j + ew.tr_mul(y) * mu;
            let beta_hat = prec.solve_mat(&rhs);
            let r = residuals(e, y, &beta_hat);
            let mut rw = r.clone();
            for (i, mut row) in rw.row_iter_mut().enumerate() {
                row *= w[i];
            }
            let dev = &beta_hat - m_j;
            let contrib = r.tr_mul(&rw) * mu + dev.tr_mul(&(&p * &dev));
            Ok((
                ComponentState {
                    beta_hat,
                    prec,
                    mass,
                },
                contrib,
            ))
        })
        .collect::<Result<_>>()?;
    let mut scale = h.sigma_prior.scale.values().clone();
    let mut components = Vec::with_capacity(h.trunc);
    for (c, contrib) in updated {
        scale += contrib;
        components.push(c);
    }
    state.components = components;
    state.sigma = InvWishartParams {
        dof: h.sigma_prior.dof + n as f64,
        scale: SpdMatrix::new(crate::numstat::symmetrize(scale))?,
    };
    Ok(())
}

/// `â_τ = a_τ + nm/2`, `b̂_τ = b_τ + ½ ΣΣ q_ij (r_ijᵀ ν̂Ŝ⁻¹ r_ij + m E_iᵀV_j⁻¹E_i)`.
pub fn update_tau(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    q: &AllocationTable,
    state: &mut VariationalState,
    h: &Hyperparameters,
) -> Result<()> {
    check_data(e, y, h)?;
    let n = e.nrows();
    let m = y.ncols() as f64;
    let nu = state.sigma.dof;
    let total: f64 = (0..h.trunc)
        .into_par_iter()
        .map(|j| {
            let w = q.q.column(j);
            if w.sum() == 0.0 {
                return 0.0;
            }
            let comp = &state.components[j];
            let r = residuals(e, y, &comp.beta_hat);
            let wr = state.sigma.scale.whiten_mat(&r.transpose());
            let we = comp.prec.whiten_mat(&e.transpose());
            (0..n)
                .filter(|&i| w[i] != 0.0)
                .map(|i| {
                    w[i] * (nu * wr.column(i).norm_squared() + m * we.column(i).norm_squared())
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    state.tau = InvGammaParams {
        shape: h.tau_prior.shape + 0.5 * n as f64 * m,
        rate: h.tau_prior.rate + 0.5 * total,
    };
    Ok(())
}

/// `â_k = a_k + mT/2`,
/// `b̂_k = b_k + ½ Σ_j ((β̂_{j,k} − M_{j,k}) ν̂Ŝ⁻¹ (β̂_{j,k} − M_{j,k})ᵀ + m (V_j⁻¹)_kk)`.
pub fn update_omega(state: &mut VariationalState, h: &Hyperparameters) -> Result<()> {
    let inv_diags: Vec<DVector<f64>> = state
        .components
        .par_iter()
        .map(|c| c.prec.inverse_diagonal())
        .collect();
    state.omegas = omega_factors(state, h, &inv_diags);
    Ok(())
}

/// The ω update given precomputed diagonals of every `V_j⁻¹`.
pub(crate) fn omega_factors(
    state: &VariationalState,
    h: &Hyperparameters,
    inv_diags: &[DVector<f64>],
) -> Vec<InvGammaParams> {
    let m = state.response_dim() as f64;
    let t = state.trunc() as f64;
    let nu = state.sigma.dof;
    let d = h.design_dim();
    let mut acc = vec![0.0; d];
    for (j, comp) in state.components.iter().enumerate() {
        let dev = &comp.beta_hat - &h.prior_means[j];
        let white = state.sigma.scale.whiten_mat(&dev.transpose());
        for (k, a) in acc.iter_mut().enumerate() {
            *a += nu * white.column(k).norm_squared() + m * inv_diags[j][k];
        }
    }
    h.omega_priors
        .iter()
        .zip(acc)
        .map(|(p, a)| InvGammaParams {
            shape: p.shape + 0.5 * m * t,
            rate: p.rate + 0.5 * a,
        })
        .collect()
}

/// Jacobi update of the soft assignments from the previous sweep's table.
/// Row `i` (1-based) only spans components `1..=min(i, T)`.
pub fn update_delta(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    q_prev: &AllocationTable,
    state: &VariationalState,
    alpha: f64,
) -> Result<AllocationTable> {
    let n = e.nrows();
    let t = state.trunc();
    let loglik = ExpectedLoglik::new(state)?;
    let sums = q_prev.column_masses();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = y.row(i).transpose();
            let ei = e.row(i).transpose();
            let cand = (i + 1).min(t);
            let logs: Vec<f64> = (0..cand)
                .map(|j| {
                    let others = (sums[j] - q_prev.q[(i, j)]).max(0.0);
                    (others + alpha / t as f64).ln() + loglik.component(&yi, &ei, j)
                })
                .collect();
            let lse = log_sum_exp(&logs);
            assert!(lse.is_finite(), "allocation row {i} is not finite");
            let mut row = vec![0.0; t];
            for (j, l) in logs.iter().enumerate() {
                row[j] = (l - lse).exp();
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect();
    let q = DMatrix::from_fn(n, t, |i, j| rows[i][j]);
    Ok(AllocationTable { q })
}

fn scaled_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / (1.0 + old.abs())
}

fn max_change_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| scaled_change(*x, *y))
        .fold(0.0, f64::max)
}

fn state_change(
    old: &VariationalState,
    new: &VariationalState,
    q_old: &AllocationTable,
    q_new: &AllocationTable,
) -> f64 {
    let mut worst = max_change_mat(old.sigma.scale.values(), new.sigma.scale.values());
    worst = worst.max(scaled_change(old.tau.rate, new.tau.rate));
    for (a, b) in old.omegas.iter().zip(&new.omegas) {
        worst = worst.max(scaled_change(a.rate, b.rate));
    }
    for (a, b) in old.components.iter().zip(&new.components) {
        worst = worst.max(max_change_mat(&a.beta_hat, &b.beta_hat));
        worst = worst.max(max_change_mat(a.prec.values(), b.prec.values()));
    }
    worst.max(max_change_mat(&q_old.q, &q_new.q))
}

/// One full sweep; returns the new table.
pub fn sweep(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    q: &AllocationTable,
    state: &mut VariationalState,
    h: &Hyperparameters,
) -> Result<AllocationTable> {
    update_global(e, y, q, state, h)?;
    update_tau(e, y, q, state, h)?;
    update_omega(state, h)?;
    update_delta(e, y, q, state, h.alpha)
}

/// Fit from a random one-hot initialization drawn with `opts.seed`.
pub fn fit_batch(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    h: &Hyperparameters,
    opts: BatchOptions,
) -> Result<BatchFit> {
    let mut rng = seeded_rng(opts.seed);
    let q0 = AllocationTable::random_one_hot(e.nrows(), h.trunc, &mut rng);
    fit_batch_from(e, y, h, q0, opts)
}

/// Fit from a caller-supplied initial table.
pub fn fit_batch_from(
    e: &DMatrix<f64>,
    y: &DMatrix<f64>,
    h: &Hyperparameters,
    q0: AllocationTable,
    opts: BatchOptions,
) -> Result<BatchFit> {
    check_data(e, y, h)?;
    h.validate(y.ncols())?;
    if q0.q.shape() != (e.nrows(), h.trunc) {
        return Err(Error::DimensionMismatch(format!(
            "initial table is {}x{}, expected {}x{}",
            q0.q.nrows(),
            q0.q.ncols(),
            e.nrows(),
            h.trunc
        )));
    }
    let mut state = init_state(h)?;
    let mut q = q0;
    let mut max_change = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let before = state.clone();
        let q_new = sweep(e, y, &q, &mut state, h)?;
        let change = state_change(&before, &state, &q, &q_new);
        q = q_new;
        max_change.push(change);
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let masses = q.column_masses();
    for (c, mass) in state.components.iter_mut().zip(masses) {
        c.mass = mass;
    }
    state.seen = e.nrows();
    Ok(BatchFit {
        state,
        alloc: q,
        diagnostics: BatchDiagnostics {
            max_change,
            converged,
        },
    })
}
