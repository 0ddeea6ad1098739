//! Kernel basis expansion `x ↦ E = (1, K(x, x_1), …, K(x, x_N))`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel profile applied to the Euclidean distance `r = ‖x − c‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `exp(−r / (2κ²))`
    #[default]
    Exponential,
    /// `exp(−r² / (2κ²))`
    GaussianSq,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Self::Exponential),
            "gaussian-sq" => Ok(Self::GaussianSq),
            other => Err(Error::InvalidParams(format!("unknown kernel '{other}'"))),
        }
    }
}

/// How `κ²` summarizes the pairwise distances of the subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    #[default]
    MeanDistance,
    MeanSquaredDistance,
}

impl std::str::FromStr for BandwidthRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-distance" => Ok(Self::MeanDistance),
            "mean-squared-distance" => Ok(Self::MeanSquaredDistance),
            other => Err(Error::InvalidParams(format!("unknown bandwidth rule '{other}'"))),
        }
    }
}

/// Per-covariate centering and scaling. The sd is the population sd.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::DegenerateSample(format!(
                "standardizer needs at least 2 rows, got {n}"
            )));
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut sd = Vec::with_capacity(x.ncols());
        for (c, col) in x.column_iter().enumerate() {
            let mu = col.mean();
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt();
            if !(s > 1e-12 * mu.abs().max(1.0)) {
                return Err(Error::ConstantColumn(c));
            }
            mean.push(mu);
            sd.push(s);
        }
        Ok(Self { mean, sd })
    }

    /// Leaves covariates untouched.
    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            sd: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariate has {} entries, standardizer expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(DVector::from_fn(x.len(), |i, _| (x[i] - self.mean[i]) / self.sd[i]))
    }

    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "covariates have {} columns, standardizer expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.sd[j]
        }))
    }
}

/// Draw `count` distinct rows without replacement.
pub fn select_centers<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if count > n {
        return Err(Error::InvalidParams(format!(
            "cannot select {count} centers from {n} rows"
        )));
    }
    let picks = index::sample(rng, n, count).into_vec();
    Ok(DMatrix::from_fn(count, x.ncols(), |r, c| x[(picks[r], c)]))
}

/// Bandwidth `κ²` from pairwise distances of a random subsample of
/// `min(subsample, n)` rows. Subsamples up to 2000 rows use every pair;
/// larger ones use 5000 random pairs.
pub fn estimate_bandwidth<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    subsample: usize,
    rule: BandwidthRule,
    rng: &mut R,
) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::DegenerateSample(format!(
            "bandwidth needs at least 2 points, got {n}"
        )));
    }
    let size = subsample.min(n).max(2);
    let rows = if size == n {
        (0..n).collect::<Vec<_>>()
    } else {
        index::sample(rng, n, size).into_vec()
    };
    let dist = |a: usize, b: usize| -> f64 {
        let d2: f64 = (0..x.ncols()).map(|c| (x[(a, c)] - x[(b, c)]).powi(2)).sum();
        match rule {
            BandwidthRule::MeanDistance => d2.sqrt(),
            BandwidthRule::MeanSquaredDistance => d2,
        }
    };
    let (mut total, mut count) = (0.0, 0usize);
    if size <= 2000 {
        for a in 0..size {
            for b in (a + 1)..size {
                total += dist(rows[a], rows[b]);
                count += 1;
            }
        }
    } else {
        for _ in 0..5000 {
            let a = rng.random_range(0..size);
            let mut b = rng.random_range(0..size - 1);
            if b >= a {
                b += 1;
            }
            total += dist(rows[a], rows[b]);
            count += 1;
        }
    }
    let kappa_sq = total / count as f64;
    if !(kappa_sq > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(kappa_sq)
}

/// Options for [`BasisMap::fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisOptions {
    pub basis_count: usize,
    pub kernel: KernelKind,
    pub bandwidth_rule: BandwidthRule,
    pub subsample: usize,
    pub standardize: bool,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            basis_count: 0,
            kernel: KernelKind::Exponential,
            bandwidth_rule: BandwidthRule::MeanDistance,
            subsample: 5000,
            standardize: true,
        }
    }
}

/// Fixed design map fitted on training covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMap {
    /// `N × p`, in standardized coordinates.
    pub centers: DMatrix<f64>,
    pub kappa_sq: f64,
    pub standardizer: Standardizer,
    pub kernel: KernelKind,
}

impl BasisMap {
    pub fn fit<R: Rng + ?Sized>(x: &DMatrix<f64>, opts: BasisOptions, rng: &mut R) -> Result<Self> {
        let standardizer = if opts.standardize {
            Standardizer::fit(x)?
        } else {
            Standardizer::identity(x.ncols())
        };
        let z = standardizer.apply_rows(x)?;
        let centers = select_centers(&z, opts.basis_count, rng)?;
        let kappa_sq = estimate_bandwidth(&z, opts.subsample, opts.bandwidth_rule, rng)?;
        Ok(Self {
            centers,
            kappa_sq,
            standardizer,
            kernel: opts.kernel,
        })
    }

    pub fn basis_count(&self) -> usize {
        self.centers.nrows()
    }

    pub fn design_dim(&self) -> usize {
        self.basis_count() + 1
    }

    pub fn covariate_dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Design vector for an already standardized covariate.
    pub fn expand(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.centers.ncols() && self.basis_count() > 0 {
            return Err(Error::DimensionMismatch(format!(
                "covariate has {} entries, centers have {}",
                z.len(),
                self.centers.ncols()
            )));
        }
        let mut e = DVector::from_element(self.design_dim(), 1.0);
        for r in 0..self.basis_count() {
            let d2: f64 = (0..z.len()).map(|c| (z[c] - self.centers[(r, c)]).powi(2)).sum();
            e[r + 1] = match self.kernel {
                KernelKind::Exponential => (-d2.sqrt() / (2.0 * self.kappa_sq)).exp(),
                KernelKind::GaussianSq => (-d2 / (2.0 * self.kappa_sq)).exp(),
            };
        }
        Ok(e)
    }

    /// Design vector for a raw covariate.
    pub fn design(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.expand(&self.standardizer.apply(x)?)
    }

    /// Design matrix (`n × (N+1)`, one row per observation) for raw covariates.
    pub fn design_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let z = self.standardizer.apply_rows(x)?;
        let rows: Vec<DVector<f64>> = (0..z.nrows())
            .into_par_iter()
            .map(|i| self.expand(&z.row(i).transpose()))
            .collect::<Result<_>>()?;
        let d = self.design_dim();
        Ok(DMatrix::from_fn(z.nrows(), d, |i, k| rows[i][k]))
    }
}
