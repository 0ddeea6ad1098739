//! Linear algebra on symmetric positive-definite matrices, the special
//! functions and log densities of the matrix-variate families used by the
//! model, and seeded samplers for them.
//!
//! Every determinant and quadratic form goes through a lower Cholesky factor.
//! No explicit inverses are formed on the hot paths.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Seedable generator used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`, so parallel
/// work gives the same draws regardless of scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SYMMETRY_TOL: f64 = 1e-12;
const JITTER_SCALE: f64 = 1e-10;

/// A symmetric positive-definite matrix together with its lower Cholesky
/// factor. The two are kept in sync by every constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl SpdMatrix {
    /// Factor a symmetric matrix. A failed factorization is retried once with
    /// `1e-10 * trace / dim` added to the diagonal.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if n == 0 || values.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected a non-empty square matrix, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        for j in 0..n {
            for i in (j + 1)..n {
                if (values[(i, j)] - values[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSpd(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let mut values = values;
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (values[(i, j)] + values[(j, i)]);
                values[(i, j)] = avg;
                values[(j, i)] = avg;
            }
        }
        if let Some(chol) = factor(&values) {
            return Ok(Self { values, chol });
        }
        let jitter = JITTER_SCALE * values.trace().abs() / n as f64;
        let mut repaired = values;
        for i in 0..n {
            repaired[(i, i)] += jitter;
        }
        match factor(&repaired) {
            Some(chol) => Ok(Self {
                values: repaired,
                chol,
            }),
            None => Err(Error::NotSpd(format!(
                "cholesky failed after diagonal jitter {jitter:e}"
            ))),
        }
    }

    /// Build from a lower-triangular factor with strictly positive diagonal.
    pub fn from_factor(chol: DMatrix<f64>) -> Result<Self> {
        check_factor(&chol)?;
        let values = &chol * chol.transpose();
        Ok(Self { values, chol })
    }

    /// Rebuild from stored values and factor, verifying that they agree.
    pub fn from_parts(values: DMatrix<f64>, chol: DMatrix<f64>) -> Result<Self> {
        check_factor(&chol)?;
        if values.shape() != chol.shape() {
            return Err(Error::DimensionMismatch(
                "values and factor differ in shape".into(),
            ));
        }
        let rebuilt = &chol * chol.transpose();
        let scale = values.amax().max(1.0);
        if (&rebuilt - &values).amax() > 1e-8 * scale {
            return Err(Error::NotSpd("factor does not reproduce values".into()));
        }
        Ok(Self { values, chol })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: DMatrix::identity(n, n),
            chol: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(diag: &DVector<f64>) -> Result<Self> {
        if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::NotSpd("non-positive diagonal".into()));
        }
        Ok(Self {
            values: DMatrix::from_diagonal(diag),
            chol: DMatrix::from_diagonal(&diag.map(f64::sqrt)),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = values`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ b`
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `L⁻¹ B`
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `A⁻¹ b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.chol.solve_lower_triangular_unchecked_mut(&mut x);
        self.chol.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `A⁻¹ B`
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.solve_lower_triangular_unchecked_mut(&mut x);
        self.chol.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b`
    pub fn inv_quad(&self, b: &DVector<f64>) -> f64 {
        self.whiten(b).norm_squared()
    }

    /// `bᵀ A b`
    pub fn quad(&self, b: &DVector<f64>) -> f64 {
        (self.chol.transpose() * b).norm_squared()
    }

    /// `Bᵀ A B` computed as `(Lᵀ B)ᵀ (Lᵀ B)`.
    pub fn sandwich(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let lb = self.chol.transpose() * b;
        lb.transpose() * lb
    }

    /// `Bᵀ A⁻¹ B`
    pub fn inv_sandwich(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.whiten_mat(b);
        w.transpose() * w
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Diagonal of `A⁻¹`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let n = self.dim();
        let mut linv = DMatrix::identity(n, n);
        self.chol.solve_lower_triangular_unchecked_mut(&mut linv);
        DVector::from_fn(n, |k, _| linv.column(k).norm_squared())
    }

    /// `A + c v vᵀ` for `c ≥ 0`, updating the factor in `O(n²)`.
    pub fn rank_one_update(&self, v: &DVector<f64>, c: f64) -> Result<Self> {
        let n = self.dim();
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "rank-one vector has length {}, matrix is {n}x{n}",
                v.len()
            )));
        }
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::Domain(format!("rank-one weight {c} must be >= 0")));
        }
        if c == 0.0 {
            return Ok(self.clone());
        }
        let mut values = self.values.clone();
        for j in 0..n {
            for i in 0..n {
                values[(i, j)] += c * (v[i] * v[j]);
            }
        }
        let mut chol = self.chol.clone();
        let mut x = v * c.sqrt();
        for k in 0..n {
            let lkk = chol[(k, k)];
            let r = lkk.hypot(x[k]);
            let cc = r / lkk;
            let s = x[k] / lkk;
            chol[(k, k)] = r;
            for i in (k + 1)..n {
                let lik = (chol[(i, k)] + s * x[i]) / cc;
                chol[(i, k)] = lik;
                x[i] = cc * x[i] - s * lik;
            }
        }
        Ok(Self { values, chol })
    }

    /// `k · A` for `k > 0`, scaling the factor by `√k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Domain(format!("scale factor {k} must be > 0")));
        }
        Ok(Self {
            values: &self.values * k,
            chol: &self.chol * k.sqrt(),
        })
    }

    /// Sum of two SPD matrices (refactored).
    pub fn add(&self, other: &DMatrix<f64>) -> Result<Self> {
        SpdMatrix::new(&self.values + other)
    }
}

fn factor(values: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(values.clone())?.unpack();
    if chol.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(chol)
    } else {
        None
    }
}

fn check_factor(chol: &DMatrix<f64>) -> Result<()> {
    let n = chol.nrows();
    if n == 0 || chol.ncols() != n {
        return Err(Error::DimensionMismatch("factor must be square".into()));
    }
    for j in 0..n {
        if !(chol[(j, j)] > 0.0) || !chol[(j, j)].is_finite() {
            return Err(Error::NotSpd(format!("factor diagonal {j} not positive")));
        }
        for i in 0..j {
            if chol[(i, j)] != 0.0 {
                return Err(Error::NotSpd("factor is not lower triangular".into()));
            }
        }
    }
    if chol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotSpd("non-finite factor entry".into()));
    }
    Ok(())
}

/// `log Γ_m(x) = m(m−1)/4 · log π + Σ_{i=1..m} log Γ(x + (1−i)/2)`
pub fn log_mvgamma(m: usize, x: f64) -> Result<f64> {
    check_mv_domain(m, x)?;
    let mf = m as f64;
    let mut acc = mf * (mf - 1.0) / 4.0 * PI.ln();
    for i in 1..=m {
        acc += ln_gamma(x + (1.0 - i as f64) / 2.0);
    }
    Ok(acc)
}

/// Derivative of [`log_mvgamma`] in `x`: `Σ_{i=1..m} ψ(x + (1−i)/2)`.
pub fn mv_digamma(m: usize, x: f64) -> Result<f64> {
    check_mv_domain(m, x)?;
    Ok((1..=m).map(|i| digamma(x + (1.0 - i as f64) / 2.0)).sum())
}

fn check_mv_domain(m: usize, x: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::Domain("dimension must be positive".into()));
    }
    if !(x > (m as f64 - 1.0) / 2.0) {
        return Err(Error::Domain(format!(
            "argument {x} must exceed {}",
            (m as f64 - 1.0) / 2.0
        )));
    }
    Ok(())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Inverse-gamma `IG(shape, rate)` with density `∝ x^{−shape−1} e^{−rate/x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = Self { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::InvalidParams(format!("shape {} must be > 0", self.shape)));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::InvalidParams(format!("rate {} must be > 0", self.rate)));
        }
        Ok(())
    }

    /// `E(1/x) = shape / rate`
    pub fn mean_inverse(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E(log x) = log rate − ψ(shape)`
    pub fn mean_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }
}

impl Distribution<f64> for InvGammaParams {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("validated parameters");
        1.0 / g.sample(rng)
    }
}

/// Inverse-Wishart `IW(dof, scale)` with density
/// `∝ |Σ|^{−(dof+m+1)/2} exp(−tr(scale Σ⁻¹)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvWishartParams {
    pub dof: f64,
    pub scale: SpdMatrix,
}

impl InvWishartParams {
    pub fn new(dof: f64, scale: SpdMatrix) -> Result<Self> {
        let p = Self { dof, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.scale.dim() as f64;
        if !(self.dof > m - 1.0) || !self.dof.is_finite() {
            return Err(Error::InvalidParams(format!(
                "inverse-Wishart dof {} must exceed dim - 1 = {}",
                self.dof,
                m - 1.0
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.scale.dim()
    }

    /// `E(Σ⁻¹) = dof · scale⁻¹`
    pub fn mean_inverse(&self) -> DMatrix<f64> {
        self.scale.inverse() * self.dof
    }

    /// `E(log|Σ|) = log|scale| − m log 2 − ψ_m(dof/2)`
    pub fn mean_log_det(&self) -> f64 {
        let m = self.dim();
        self.scale.log_det()
            - m as f64 * std::f64::consts::LN_2
            - mv_digamma(m, self.dof / 2.0).expect("validated dof")
    }

    pub fn mean(&self) -> Option<DMatrix<f64>> {
        let denom = self.dof - self.dim() as f64 - 1.0;
        (denom > 0.0).then(|| self.scale.values() / denom)
    }
}

impl Distribution<SpdMatrix> for InvWishartParams {
    /// Bartlett draw of `W ~ Wishart(dof, scale⁻¹)`, returned as `W⁻¹`.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SpdMatrix {
        let m = self.dim();
        let scale_inv = SpdMatrix::new(self.scale.inverse()).expect("inverse of SPD is SPD");
        let l = scale_inv.chol();
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            let chi = ChiSquared::new(self.dof - i as f64).expect("validated dof");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(StandardNormal);
            }
        }
        // W = (L A)(L A)ᵀ, so Σ = W⁻¹ = (L A)⁻ᵀ (L A)⁻¹.
        let la = l * a;
        let mut inv = DMatrix::identity(m, m);
        la.solve_lower_triangular_unchecked_mut(&mut inv);
        let sigma = inv.transpose() * inv;
        SpdMatrix::new(symmetrize(sigma)).expect("Bartlett draw is SPD")
    }
}

/// Matrix-variate normal `N_{s,t}(mean, row_cov ⊗ col_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalParams {
    pub mean: DMatrix<f64>,
    pub row_cov: SpdMatrix,
    pub col_cov: SpdMatrix,
}

impl MatrixNormalParams {
    pub fn new(mean: DMatrix<f64>, row_cov: SpdMatrix, col_cov: SpdMatrix) -> Result<Self> {
        if mean.nrows() != row_cov.dim() || mean.ncols() != col_cov.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mean is {}x{}, row cov {}, col cov {}",
                mean.nrows(),
                mean.ncols(),
                row_cov.dim(),
                col_cov.dim()
            )));
        }
        Ok(Self {
            mean,
            row_cov,
            col_cov,
        })
    }
}

impl Distribution<DMatrix<f64>> for MatrixNormalParams {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let (s, t) = self.mean.shape();
        let g = DMatrix::<f64>::from_fn(s, t, |_, _| rng.sample(StandardNormal));
        &self.mean + self.row_cov.chol() * g * self.col_cov.chol().transpose()
    }
}

/// Exact matrix-normal log density via Cholesky log-determinants and
/// triangular solves.
pub fn matrix_normal_logpdf(z: &DMatrix<f64>, params: &MatrixNormalParams) -> Result<f64> {
    if z.shape() != params.mean.shape() {
        return Err(Error::DimensionMismatch(format!(
            "argument is {}x{}, mean is {}x{}",
            z.nrows(),
            z.ncols(),
            params.mean.nrows(),
            params.mean.ncols()
        )));
    }
    let (s, t) = z.shape();
    let diff = z - &params.mean;
    // ‖L_V⁻¹ D L_W⁻ᵀ‖²_F = tr(V⁻¹ D W⁻¹ Dᵀ)
    let x = params.row_cov.whiten_mat(&diff);
    let y = params.col_cov.whiten_mat(&x.transpose());
    let quad = y.norm_squared();
    let (sf, tf) = (s as f64, t as f64);
    Ok(-0.5 * sf * tf * (2.0 * PI).ln()
        - 0.5 * tf * params.row_cov.log_det()
        - 0.5 * sf * params.col_cov.log_det()
        - 0.5 * quad)
}

/// Multivariate t log density written in quadratic-form shape:
/// `∝ (1 + (y−μ)ᵀ A (y−μ))^{−e/2}` with `A = shape` and `e = tail_exponent`.
/// This is a standard multivariate t with `dof = e − m` and scale `(dof·A)⁻¹`.
pub fn mvt_logpdf(
    y: &DVector<f64>,
    location: &DVector<f64>,
    shape: &SpdMatrix,
    tail_exponent: f64,
) -> Result<f64> {
    let m = y.len();
    if location.len() != m || shape.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "point {m}, location {}, shape {}",
            location.len(),
            shape.dim()
        )));
    }
    let mf = m as f64;
    if !(tail_exponent > mf) {
        return Err(Error::Domain(format!(
            "tail exponent {tail_exponent} must exceed dimension {m}"
        )));
    }
    let d = y - location;
    let quad = shape.quad(&d);
    Ok(mvt_log_norm(mf, shape.log_det(), tail_exponent) - 0.5 * tail_exponent * quad.ln_1p())
}

/// Normalizing constant of the quadratic-form t density.
pub(crate) fn mvt_log_norm(m: f64, log_det_shape: f64, tail_exponent: f64) -> f64 {
    ln_gamma(0.5 * tail_exponent) - ln_gamma(0.5 * (tail_exponent - m)) - 0.5 * m * PI.ln()
        + 0.5 * log_det_shape
}

pub(crate) fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    a
}
