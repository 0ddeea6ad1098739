//! Hyperparameters, the variational state shared by both fitters, and the
//! on-disk state format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::basis::{BasisMap, KernelKind, Standardizer};
use crate::error::{Error, Result};
use crate::numstat::{mv_digamma, InvGammaParams, InvWishartParams, SpdMatrix};

/// A component counts as occupied once its accumulated mass exceeds this.
pub const OCCUPANCY_THRESHOLD: f64 = 1e-6;

/// Version written into every state file.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub alpha: f64,
    pub trunc: usize,
    pub basis_count: usize,
    pub tau_prior: InvGammaParams,
    /// One inverse-gamma prior per design coordinate (`N + 1` entries).
    pub omega_priors: Vec<InvGammaParams>,
    pub sigma_prior: InvWishartParams,
    /// `M_j`, each `(N+1) × m`.
    pub prior_means: Vec<DMatrix<f64>>,
    /// `C_j`, each `(N+1) × (N+1)`, zero or SPD.
    pub prior_precs: Vec<DMatrix<f64>>,
}

impl Hyperparameters {
    /// Defaults: `a_τ = 5, b_τ = 0.5, a_k = 20, b_k = 0.5, S = I + 𝟙𝟙ᵀ/m,
    /// ν = m + 1, M_j = 0, C_j = 0`.
    pub fn with_defaults(m: usize, basis_count: usize, trunc: usize, alpha: f64) -> Self {
        let d = basis_count + 1;
        let mf = m as f64;
        let scale = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } + 1.0 / mf);
        Self {
            alpha,
            trunc,
            basis_count,
            tau_prior: InvGammaParams {
                shape: 5.0,
                rate: 0.5,
            },
            omega_priors: vec![
                InvGammaParams {
                    shape: 20.0,
                    rate: 0.5
                };
                d
            ],
            sigma_prior: InvWishartParams {
                dof: mf + 1.0,
                scale: SpdMatrix::new(scale).expect("default scale is SPD"),
            },
            prior_means: vec![DMatrix::zeros(d, m); trunc],
            prior_precs: vec![DMatrix::zeros(d, d); trunc],
        }
    }

    pub fn set_omega_priors(&mut self, shape: f64, rate: f64) {
        self.omega_priors = vec![InvGammaParams { shape, rate }; self.basis_count + 1];
    }

    pub fn response_dim(&self) -> usize {
        self.sigma_prior.dim()
    }

    pub fn design_dim(&self) -> usize {
        self.basis_count + 1
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        validate_config(self, m).map_err(Error::Config)
    }
}

/// Every violated constraint, not just the first.
pub fn validate_config(h: &Hyperparameters, m: usize) -> std::result::Result<(), Vec<String>> {
    let mut errs = Vec::new();
    let d = h.basis_count + 1;
    if !(h.alpha > 0.0 && h.alpha.is_finite()) {
        errs.push(format!("alpha must be > 0, got {}", h.alpha));
    }
    if h.trunc < 1 {
        errs.push("trunc must be >= 1".to_string());
    }
    if m < 1 {
        errs.push("response dimension must be >= 1".to_string());
    }
    if let Err(e) = h.tau_prior.validate() {
        errs.push(format!("tauPrior: {e}"));
    }
    if h.omega_priors.len() != d {
        errs.push(format!(
            "omegaPriors has {} entries, expected basisCount + 1 = {d}",
            h.omega_priors.len()
        ));
    }
    for (k, p) in h.omega_priors.iter().enumerate() {
        if let Err(e) = p.validate() {
            errs.push(format!("omegaPriors[{k}]: {e}"));
        }
    }
    if h.sigma_prior.dim() != m {
        errs.push(format!(
            "sigmaPrior scale is {0}x{0}, expected {m}x{m}",
            h.sigma_prior.dim()
        ));
    }
    if !(h.sigma_prior.dof > m as f64 - 1.0) || !h.sigma_prior.dof.is_finite() {
        errs.push(format!(
            "sigmaPrior dof too small: {} must exceed m - 1 = {}",
            h.sigma_prior.dof,
            m as f64 - 1.0
        ));
    }
    if h.prior_means.len() != h.trunc {
        errs.push(format!(
            "componentPriorMeans has {} entries, expected trunc = {}",
            h.prior_means.len(),
            h.trunc
        ));
    }
    for (j, mj) in h.prior_means.iter().enumerate() {
        if mj.shape() != (d, m) {
            errs.push(format!(
                "componentPriorMeans[{j}] is {}x{}, expected {d}x{m}",
                mj.nrows(),
                mj.ncols()
            ));
        } else if mj.iter().any(|v| !v.is_finite()) {
            errs.push(format!("componentPriorMeans[{j}] has non-finite entries"));
        }
    }
    if h.prior_precs.len() != h.trunc {
        errs.push(format!(
            "componentPriorPrecs has {} entries, expected trunc = {}",
            h.prior_precs.len(),
            h.trunc
        ));
    }
    for (j, cj) in h.prior_precs.iter().enumerate() {
        if cj.shape() != (d, d) {
            errs.push(format!(
                "componentPriorPrecs[{j}] is {}x{}, expected {d}x{d}",
                cj.nrows(),
                cj.ncols()
            ));
        } else if cj.iter().any(|v| *v != 0.0) && SpdMatrix::new(cj.clone()).is_err() {
            errs.push(format!("componentPriorPrecs[{j}] is neither zero nor SPD"));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentState {
    pub beta_hat: DMatrix<f64>,
    pub prec: SpdMatrix,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub components: Vec<ComponentState>,
    pub sigma: InvWishartParams,
    pub tau: InvGammaParams,
    pub omegas: Vec<InvGammaParams>,
    pub seen: usize,
}

/// The variational expectations every update reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectations {
    /// `E(τ⁻¹) = a_τ / b_τ`
    pub tau_inv: f64,
    /// `E(Σ⁻¹) = ν S⁻¹`
    pub sigma_inv: DMatrix<f64>,
    /// `E(Ω⁻¹) = diag(a_k / b_k)`
    pub omega_inv: DVector<f64>,
}

impl VariationalState {
    pub fn trunc(&self) -> usize {
        self.components.len()
    }

    pub fn response_dim(&self) -> usize {
        self.sigma.dim()
    }

    pub fn design_dim(&self) -> usize {
        self.omegas.len()
    }

    pub fn occupied(&self) -> usize {
        self.components
            .iter()
            .filter(|c| c.mass > OCCUPANCY_THRESHOLD)
            .count()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mass).collect()
    }

    pub fn omega_inv(&self) -> DVector<f64> {
        DVector::from_iterator(self.omegas.len(), self.omegas.iter().map(|o| o.mean_inverse()))
    }

    pub fn expectations(&self) -> Expectations {
        Expectations {
            tau_inv: self.tau.mean_inverse(),
            sigma_inv: self.sigma.mean_inverse(),
            omega_inv: self.omega_inv(),
        }
    }
}

/// `V_j⁽⁰⁾ = diag(a_k / b_k) + C_j`, `β̂_j⁽⁰⁾ = M_j`.
pub fn prior_component(h: &Hyperparameters, j: usize) -> Result<ComponentState> {
    let omega_inv = DVector::from_iterator(
        h.omega_priors.len(),
        h.omega_priors.iter().map(|o| o.mean_inverse()),
    );
    let prec = SpdMatrix::new(DMatrix::from_diagonal(&omega_inv) + &h.prior_precs[j])?;
    Ok(ComponentState {
        beta_hat: h.prior_means[j].clone(),
        prec,
        mass: 0.0,
    })
}

pub fn init_state(h: &Hyperparameters) -> Result<VariationalState> {
    h.validate(h.response_dim())?;
    let components = (0..h.trunc)
        .map(|j| prior_component(h, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariationalState {
        components,
        sigma: h.sigma_prior.clone(),
        tau: h.tau_prior,
        omegas: h.omega_priors.clone(),
        seen: 0,
    })
}

/// Expected log likelihood `E_q log p(y | θ_j)` under the current factors.
/// Shared by the batch allocation update and the lower bound.
#[derive(Debug, Clone)]
pub struct ExpectedLoglik<'a> {
    state: &'a VariationalState,
    constant: f64,
    tau_inv: f64,
}

impl<'a> ExpectedLoglik<'a> {
    pub fn new(state: &'a VariationalState) -> Result<Self> {
        let m = state.response_dim();
        let mf = m as f64;
        let e_log_tau = state.tau.rate.ln() - digamma(state.tau.shape);
        let e_log_det_sigma = -mv_digamma(m, state.sigma.dof / 2.0)?
            - mf * std::f64::consts::LN_2
            + state.sigma.scale.log_det();
        let constant = -0.5 * mf * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * mf * e_log_tau
            - 0.5 * e_log_det_sigma;
        Ok(Self {
            state,
            constant,
            tau_inv: state.tau.mean_inverse(),
        })
    }

    pub fn component(&self, y: &DVector<f64>, e: &DVector<f64>, j: usize) -> f64 {
        let comp = &self.state.components[j];
        let resid = y - comp.beta_hat.tr_mul(e);
        let m = y.len() as f64;
        let quad = self.state.sigma.dof * self.state.sigma.scale.inv_quad(&resid)
            + m * comp.prec.inv_quad(e);
        self.constant - 0.5 * self.tau_inv * quad
    }
}

/// Batch soft assignments `q_ij = q(δ_i = j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationTable {
    pub q: DMatrix<f64>,
}

impl AllocationTable {
    /// Validates row sums and the order-of-occurrence constraint
    /// `q_ij = 0` for `j > min(i, T)`.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let t = q.ncols();
        for (i, row) in q.row_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParams(format!("row {i} has invalid entries")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParams(format!("row {i} sums to {s}")));
            }
            if ((i + 1).min(t)..t).any(|j| row[j] != 0.0) {
                return Err(Error::InvalidParams(format!(
                    "row {i} assigns mass beyond component {}",
                    (i + 1).min(t)
                )));
            }
        }
        Ok(Self { q })
    }

    /// Row `i` is one-hot on a component drawn uniformly from `1..=min(i, T)`.
    pub fn random_one_hot<R: Rng + ?Sized>(n: usize, trunc: usize, rng: &mut R) -> Self {
        let mut q = DMatrix::zeros(n, trunc);
        for i in 0..n {
            let j = rng.random_range(0..(i + 1).min(trunc));
            q[(i, j)] = 1.0;
        }
        Self { q }
    }

    pub fn rows(&self) -> usize {
        self.q.nrows()
    }

    pub fn column_masses(&self) -> Vec<f64> {
        self.q.column_iter().map(|c| c.sum()).collect()
    }
}

/// Everything persisted by [`save_state`].
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub hyper: Hyperparameters,
    pub state: VariationalState,
    pub basis: BasisMap,
    /// Per-observation soft assignments of the training data, when kept.
    pub allocations: Option<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpdRecord {
    dim: usize,
    values: MatrixRecord,
    chol: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct IgRecord {
    shape: f64,
    rate: f64,
}

#[derive(Serialize, Deserialize)]
struct IwRecord {
    dof: f64,
    scale: SpdRecord,
}

#[derive(Serialize, Deserialize)]
struct HyperRecord {
    alpha: f64,
    trunc: usize,
    basis_count: usize,
    response_dim: usize,
    tau_prior: IgRecord,
    omega_priors: Vec<IgRecord>,
    sigma_prior: IwRecord,
    prior_means: Vec<MatrixRecord>,
    prior_precs: Vec<MatrixRecord>,
}

#[derive(Serialize, Deserialize)]
struct ComponentRecord {
    beta_hat: MatrixRecord,
    prec: SpdRecord,
    mass: f64,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    seen: usize,
    sigma: IwRecord,
    tau: IgRecord,
    omegas: Vec<IgRecord>,
    components: Vec<ComponentRecord>,
}

#[derive(Serialize, Deserialize)]
struct BasisRecord {
    kappa_sq: f64,
    kernel: KernelKind,
    centers: MatrixRecord,
    standardizer: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct FileRecord {
    schema_version: u32,
    hyperparameters: HyperRecord,
    state: StateRecord,
    basis: BasisRecord,
    allocations: Option<MatrixRecord>,
}

fn mat_rec(m: &DMatrix<f64>) -> MatrixRecord {
    MatrixRecord {
        rows: m.nrows(),
        cols: m.ncols(),
        values: m.transpose().iter().copied().collect(),
    }
}

fn mat_from(r: MatrixRecord, what: &str) -> Result<DMatrix<f64>> {
    if r.values.len() != r.rows * r.cols {
        return Err(Error::Inconsistent(format!(
            "{what} declares {}x{} but stores {} values",
            r.rows,
            r.cols,
            r.values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.values))
}

fn spd_rec(s: &SpdMatrix) -> SpdRecord {
    SpdRecord {
        dim: s.dim(),
        values: mat_rec(s.values()),
        chol: mat_rec(s.chol()),
    }
}

fn spd_from(r: SpdRecord, what: &str) -> Result<SpdMatrix> {
    let values = mat_from(r.values, what)?;
    let chol = mat_from(r.chol, what)?;
    if values.shape() != (r.dim, r.dim) {
        return Err(Error::Inconsistent(format!(
            "{what} declares dim {} but is {}x{}",
            r.dim,
            values.nrows(),
            values.ncols()
        )));
    }
    SpdMatrix::from_parts(values, chol).map_err(|e| Error::Inconsistent(format!("{what}: {e}")))
}

fn ig_rec(p: &InvGammaParams) -> IgRecord {
    IgRecord {
        shape: p.shape,
        rate: p.rate,
    }
}

fn ig_from(r: IgRecord, what: &str) -> Result<InvGammaParams> {
    InvGammaParams::new(r.shape, r.rate).map_err(|e| Error::Inconsistent(format!("{what}: {e}")))
}

fn iw_rec(p: &InvWishartParams) -> IwRecord {
    IwRecord {
        dof: p.dof,
        scale: spd_rec(&p.scale),
    }
}

fn iw_from(r: IwRecord, what: &str) -> Result<InvWishartParams> {
    let scale = spd_from(r.scale, what)?;
    InvWishartParams::new(r.dof, scale).map_err(|e| Error::Inconsistent(format!("{what}: {e}")))
}

fn check_shape(m: &DMatrix<f64>, shape: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::Inconsistent(format!(
            "{what} is {}x{}, expected {}x{}",
            m.nrows(),
            m.ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

pub fn save_state(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = &model.hyper;
    let s = &model.state;
    let rec = FileRecord {
        schema_version: SCHEMA_VERSION,
        hyperparameters: HyperRecord {
            alpha: h.alpha,
            trunc: h.trunc,
            basis_count: h.basis_count,
            response_dim: h.response_dim(),
            tau_prior: ig_rec(&h.tau_prior),
            omega_priors: h.omega_priors.iter().map(ig_rec).collect(),
            sigma_prior: iw_rec(&h.sigma_prior),
            prior_means: h.prior_means.iter().map(mat_rec).collect(),
            prior_precs: h.prior_precs.iter().map(mat_rec).collect(),
        },
        state: StateRecord {
            seen: s.seen,
            sigma: iw_rec(&s.sigma),
            tau: ig_rec(&s.tau),
            omegas: s.omegas.iter().map(ig_rec).collect(),
            components: s
                .components
                .iter()
                .map(|c| ComponentRecord {
                    beta_hat: mat_rec(&c.beta_hat),
                    prec: spd_rec(&c.prec),
                    mass: c.mass,
                })
                .collect(),
        },
        basis: BasisRecord {
            kappa_sq: model.basis.kappa_sq,
            kernel: model.basis.kernel,
            centers: mat_rec(&model.basis.centers),
            standardizer: model.basis.standardizer.clone(),
        },
        allocations: model.allocations.as_ref().map(mat_rec),
    };
    let text = serde_json::to_string_pretty(&rec)
        .map_err(|e| Error::CorruptFile(format!("cannot encode state: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptFile("missing schema_version".into()))?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version.min(u32::MAX as u64) as u32,
            expected: SCHEMA_VERSION,
        });
    }
    let rec: FileRecord =
        serde_json::from_value(value).map_err(|e| Error::CorruptFile(e.to_string()))?;
    decode(rec)
}

fn decode(rec: FileRecord) -> Result<SavedModel> {
    let hr = rec.hyperparameters;
    let m = hr.response_dim;
    let d = hr.basis_count + 1;
    let prior_means = hr
        .prior_means
        .into_iter()
        .enumerate()
        .map(|(j, r)| mat_from(r, &format!("prior_means[{j}]")))
        .collect::<Result<Vec<_>>>()?;
    let prior_precs = hr
        .prior_precs
        .into_iter()
        .enumerate()
        .map(|(j, r)| mat_from(r, &format!("prior_precs[{j}]")))
        .collect::<Result<Vec<_>>>()?;
    let hyper = Hyperparameters {
        alpha: hr.alpha,
        trunc: hr.trunc,
        basis_count: hr.basis_count,
        tau_prior: ig_from(hr.tau_prior, "tau_prior")?,
        omega_priors: hr
            .omega_priors
            .into_iter()
            .map(|r| ig_from(r, "omega_priors"))
            .collect::<Result<_>>()?,
        sigma_prior: iw_from(hr.sigma_prior, "sigma_prior")?,
        prior_means,
        prior_precs,
    };
    validate_config(&hyper, m).map_err(|errs| Error::Inconsistent(errs.join("; ")))?;

    let sr = rec.state;
    if sr.components.len() != hyper.trunc {
        return Err(Error::Inconsistent(format!(
            "{} components stored, trunc is {}",
            sr.components.len(),
            hyper.trunc
        )));
    }
    let mut components = Vec::with_capacity(sr.components.len());
    for (j, c) in sr.components.into_iter().enumerate() {
        let beta_hat = mat_from(c.beta_hat, &format!("components[{j}].beta_hat"))?;
        check_shape(&beta_hat, (d, m), &format!("components[{j}].beta_hat"))?;
        let prec = spd_from(c.prec, &format!("components[{j}].prec"))?;
        if prec.dim() != d {
            return Err(Error::Inconsistent(format!(
                "components[{j}].prec has dim {}, expected {d}",
                prec.dim()
            )));
        }
        if !(c.mass >= 0.0) {
            return Err(Error::Inconsistent(format!("components[{j}].mass is negative")));
        }
        components.push(ComponentState {
            beta_hat,
            prec,
            mass: c.mass,
        });
    }
    let sigma = iw_from(sr.sigma, "state.sigma")?;
    if sigma.dim() != m {
        return Err(Error::Inconsistent("state.sigma has wrong dimension".into()));
    }
    let omegas = sr
        .omegas
        .into_iter()
        .map(|r| ig_from(r, "state.omegas"))
        .collect::<Result<Vec<_>>>()?;
    if omegas.len() != d {
        return Err(Error::Inconsistent(format!(
            "{} omega factors stored, expected {d}",
            omegas.len()
        )));
    }
    let state = VariationalState {
        components,
        sigma,
        tau: ig_from(sr.tau, "state.tau")?,
        omegas,
        seen: sr.seen,
    };

    let br = rec.basis;
    let centers = mat_from(br.centers, "basis.centers")?;
    if centers.nrows() != hyper.basis_count {
        return Err(Error::Inconsistent(format!(
            "basis has {} centers, basis_count is {}",
            centers.nrows(),
            hyper.basis_count
        )));
    }
    if br.standardizer.mean.len() != br.standardizer.sd.len()
        || (hyper.basis_count > 0 && centers.ncols() != br.standardizer.mean.len())
    {
        return Err(Error::Inconsistent("basis covariate dimensions disagree".into()));
    }
    if !(br.kappa_sq > 0.0) {
        return Err(Error::Inconsistent("basis kappa_sq must be > 0".into()));
    }
    let basis = BasisMap {
        centers,
        kappa_sq: br.kappa_sq,
        standardizer: br.standardizer,
        kernel: br.kernel,
    };
    let allocations = match rec.allocations {
        Some(r) => {
            let q = mat_from(r, "allocations")?;
            if q.ncols() != hyper.trunc {
                return Err(Error::Inconsistent(format!(
                    "allocations have {} columns, trunc is {}",
                    q.ncols(),
                    hyper.trunc
                )));
            }
            Some(q)
        }
        None => None,
    };
    Ok(SavedModel {
        hyper,
        state,
        basis,
        allocations,
    })
}
