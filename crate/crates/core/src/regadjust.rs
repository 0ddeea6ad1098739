//! Regression-type adjustment: responses of the k nearest training points are
//! moved to a new covariate by matching marginal predictive quantiles,
//! `y^a_l = F̂_l⁻¹(F̂_l(y_l | x_i) | x*)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::BasisMap;
use crate::error::{Error, Result};
use crate::model::{Hyperparameters, VariationalState};
use crate::predictive::{predictive_mixture, PredictiveMixture};

pub const DEFAULT_K: usize = 50;
const CDF_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedParticles {
    /// `k × m`, one adjusted response per row.
    pub particles: DMatrix<f64>,
    pub neighbor_indices: Vec<usize>,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PointEstimate {
    #[default]
    Mean,
    Median,
}

impl std::str::FromStr for PointEstimate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            other => Err(Error::InvalidParams(format!("unknown point estimate '{other}'"))),
        }
    }
}

/// Brute-force k nearest rows of `x` to `query` in Euclidean distance.
/// Ties go to the lower index.
pub fn knn_search(query: &DVector<f64>, x: &DMatrix<f64>, k: usize) -> Result<Neighbors> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidParams(format!(
            "k = {k} must lie in 1..={n}"
        )));
    }
    if query.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} entries, covariates have {} columns",
            query.len(),
            x.ncols()
        )));
    }
    let mut d: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let s: f64 = (0..x.ncols()).map(|c| (x[(i, c)] - query[c]).powi(2)).sum();
            (s.sqrt(), i)
        })
        .collect();
    let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < n {
        d.select_nth_unstable_by(k - 1, by);
        d.truncate(k);
    }
    d.sort_by(by);
    Ok(Neighbors {
        indices: d.iter().map(|p| p.1).collect(),
        distances: d.iter().map(|p| p.0).collect(),
    })
}

/// Training data and fitted model needed to adjust at arbitrary points.
#[derive(Debug, Clone)]
pub struct Adjuster<'a> {
    pub state: &'a VariationalState,
    pub hyper: &'a Hyperparameters,
    pub basis: &'a BasisMap,
    x_std: DMatrix<f64>,
    x_raw: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    /// Clamped `F̂_l(y_il | x_i)`, when precomputed.
    source_u: Option<DMatrix<f64>>,
}

impl<'a> Adjuster<'a> {
    pub fn new(
        state: &'a VariationalState,
        hyper: &'a Hyperparameters,
        basis: &'a BasisMap,
        x_raw: &'a DMatrix<f64>,
        y: &'a DMatrix<f64>,
    ) -> Result<Self> {
        if x_raw.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows but {} response rows",
                x_raw.nrows(),
                y.nrows()
            )));
        }
        if y.ncols() != state.response_dim() {
            return Err(Error::DimensionMismatch(format!(
                "responses have {} columns, model has {}",
                y.ncols(),
                state.response_dim()
            )));
        }
        Ok(Self {
            state,
            hyper,
            basis,
            x_std: basis.standardizer.apply_rows(x_raw)?,
            x_raw,
            y,
            source_u: None,
        })
    }

    /// Evaluate every training point's marginal CDFs once. Worth it when
    /// many queries share the same training set.
    pub fn with_source_cdfs(mut self) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.y.nrows())
            .into_par_iter()
            .map(|i| self.source_cdfs(i))
            .collect::<Result<_>>()?;
        let m = self.y.ncols();
        self.source_u = Some(DMatrix::from_fn(rows.len(), m, |i, l| rows[i][l]));
        Ok(self)
    }

    fn source_cdfs(&self, i: usize) -> Result<Vec<f64>> {
        let source = self.mixture_at(&self.x_raw.row(i).transpose())?;
        (0..self.y.ncols())
            .map(|l| {
                Ok(source
                    .marginal_cdf(l, self.y[(i, l)])?
                    .clamp(CDF_CLAMP, 1.0 - CDF_CLAMP))
            })
            .collect()
    }

    fn mixture_at(&self, x_raw: &DVector<f64>) -> Result<PredictiveMixture> {
        predictive_mixture(&self.basis.design(x_raw)?, self.state, self.hyper)
    }

    pub fn neighbors(&self, x_star: &DVector<f64>, k: usize) -> Result<Neighbors> {
        knn_search(&self.basis.standardizer.apply(x_star)?, &self.x_std, k)
    }

    pub fn adjust(&self, x_star: &DVector<f64>, neighbors: &Neighbors) -> Result<AdjustedParticles> {
        let target = self.mixture_at(x_star)?;
        let m = self.y.ncols();
        let mut particles = DMatrix::zeros(neighbors.indices.len(), m);
        for (r, &i) in neighbors.indices.iter().enumerate() {
            let u = match &self.source_u {
                Some(cache) => cache.row(i).iter().copied().collect(),
                None => self.source_cdfs(i)?,
            };
            for l in 0..m {
                particles[(r, l)] = target.marginal_quantile(l, u[l])?;
            }
        }
        Ok(AdjustedParticles {
            particles,
            neighbor_indices: neighbors.indices.clone(),
            distances: neighbors.distances.clone(),
        })
    }

    pub fn predict(&self, x_star: &DVector<f64>, k: usize, est: PointEstimate) -> Result<DVector<f64>> {
        let nb = self.neighbors(x_star, k)?;
        Ok(point_estimate(&self.adjust(x_star, &nb)?, est))
    }

    /// Adjusted predictions for every row of `x_test`, in parallel.
    pub fn predict_rows(&self, x_test: &DMatrix<f64>, k: usize, est: PointEstimate) -> Result<DMatrix<f64>> {
        let rows: Vec<DVector<f64>> = (0..x_test.nrows())
            .into_par_iter()
            .map(|i| self.predict(&x_test.row(i).transpose(), k, est))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(x_test.nrows(), self.y.ncols(), |i, l| rows[i][l]))
    }
}

pub fn point_estimate(p: &AdjustedParticles, est: PointEstimate) -> DVector<f64> {
    let m = p.particles.ncols();
    match est {
        PointEstimate::Mean => p.particles.row_mean().transpose(),
        PointEstimate::Median => DVector::from_fn(m, |l, _| {
            let mut v: Vec<f64> = p.particles.column(l).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }),
    }
}

/// One-shot adjusted prediction at `x_star`.
#[allow(clippy::too_many_arguments)]
pub fn predict_adjusted(
    x_star: &DVector<f64>,
    state: &VariationalState,
    hyper: &Hyperparameters,
    basis: &BasisMap,
    x_raw: &DMatrix<f64>,
    y: &DMatrix<f64>,
    k: usize,
    est: PointEstimate,
) -> Result<DVector<f64>> {
    Adjuster::new(state, hyper, basis, x_raw, y)?.predict(x_star, k, est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisOptions;
    use crate::model::init_state;
    use crate::numstat::{seeded_rng, symmetrize, InvGammaParams, SpdMatrix};
    use crate::predictive::predictive_at;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn knn_hand_ordering() {
        let x = DMatrix::from_column_slice(3, 1, &[3.0, 1.0, 2.0]);
        let nb = knn_search(&DVector::from_element(1, 0.0), &x, 2).unwrap();
        assert_eq!(nb.indices, vec![1, 2]);
        assert_eq!(nb.distances, vec![1.0, 2.0]);
    }

    #[test]
    fn knn_exact_row_and_full() {
        let mut rng = seeded_rng(1);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>());
        let q = x.row(7).transpose();
        let nb = knn_search(&q, &x, 1).unwrap();
        assert_eq!((nb.indices[0], nb.distances[0]), (7, 0.0));
        let all = knn_search(&q, &x, 30).unwrap();
        let mut sorted = all.indices.clone();
        sorted.sort();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        assert!(all.distances.windows(2).all(|w| w[0] <= w[1]));
        assert!(knn_search(&q, &x, 31).is_err());
        assert!(knn_search(&q, &x, 0).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let nb = knn_search(&DVector::from_element(1, 0.0), &x, 3).unwrap();
        assert_eq!(nb.indices, vec![0, 1, 2]);
    }

    /// Hand-built state on a fitted basis; component slopes make the
    /// predictive depend on x.
    fn model(seed: u64, t: usize) -> (Hyperparameters, VariationalState, BasisMap, DMatrix<f64>) {
        let mut rng = seeded_rng(seed);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let opts = BasisOptions {
            basis_count: 4,
            ..BasisOptions::default()
        };
        let basis = BasisMap::fit(&x, opts, &mut rng).unwrap();
        let h = Hyperparameters::with_defaults(2, 4, t, 1.0);
        let mut s = init_state(&h).unwrap();
        for c in &mut s.components {
            c.beta_hat = DMatrix::from_fn(5, 2, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            c.prec = SpdMatrix::new(DMatrix::identity(5, 5) * 50.0).unwrap();
            c.mass = 100.0;
        }
        s.seen = 100 * t;
        s.sigma.dof = 40.0;
        let b = DMatrix::<f64>::from_fn(2, 2, |_, _| rng.sample(StandardNormal));
        s.sigma.scale = SpdMatrix::new(symmetrize(&b * b.transpose() * 4.0 + DMatrix::identity(2, 2) * 8.0)).unwrap();
        s.tau = InvGammaParams {
            shape: 50.0,
            rate: 40.0,
        };
        (h, s, basis, x)
    }

    #[test]
    fn identity_case_recovers_response() {
        let (h, s, basis, x) = model(2, 2);
        let mut rng = seeded_rng(3);
        let y = DMatrix::from_fn(x.nrows(), 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let adj = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
        for i in [0, 17, 123] {
            let xi = x.row(i).transpose();
            let got = adj.predict(&xi, 1, PointEstimate::Mean).unwrap();
            assert!((got - y.row(i).transpose()).amax() < 1e-6);
        }
    }

    #[test]
    fn cached_sources_match_direct() {
        let (h, s, basis, x) = model(8, 3);
        let mut rng = seeded_rng(9);
        let y = DMatrix::from_fn(x.nrows(), 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let plain = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
        let cached = plain.clone().with_source_cdfs().unwrap();
        let xs = DVector::from_vec(vec![-0.7, 0.2]);
        let nb = plain.neighbors(&xs, 15).unwrap();
        assert_eq!(plain.adjust(&xs, &nb).unwrap(), cached.adjust(&xs, &nb).unwrap());
    }

    #[test]
    fn covariate_free_model_is_identity_map() {
        let (h, mut s, basis, x) = model(4, 2);
        for c in &mut s.components {
            for r in 1..5 {
                c.beta_hat.row_mut(r).fill(0.0);
            }
            c.prec = SpdMatrix::new(DMatrix::identity(5, 5) * 1e12).unwrap();
        }
        let mut rng = seeded_rng(5);
        let y = DMatrix::from_fn(x.nrows(), 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let adj = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
        let xs = DVector::from_vec(vec![0.3, -1.1]);
        let nb = adj.neighbors(&xs, 10).unwrap();
        let p = adj.adjust(&xs, &nb).unwrap();
        for (r, &i) in nb.indices.iter().enumerate() {
            assert!((p.particles.row(r) - y.row(i)).amax() < 1e-6);
        }
        let mean = point_estimate(&p, PointEstimate::Mean);
        let direct = DVector::from_fn(2, |l, _| {
            nb.indices.iter().map(|&i| y[(i, l)]).sum::<f64>() / 10.0
        });
        assert!((mean - direct).amax() < 1e-6);
    }

    #[test]
    fn monotone_for_single_component() {
        let (h, s, basis, x) = model(6, 1);
        let xs = DVector::from_vec(vec![1.0, 1.0]);
        let source = predictive_at(&x.row(0).transpose(), &s, &h, &basis).unwrap();
        let unit = source.components[0].marginal_scale[1];
        let mut last = f64::NEG_INFINITY;
        for step in -30..=30 {
            let v = source.center(1) + step as f64 * 0.2 * unit;
            let y = DMatrix::from_fn(x.nrows(), 2, |_, _| v);
            let adj = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
            let nb = Neighbors {
                indices: vec![0],
                distances: vec![0.0],
            };
            let got = adj.adjust(&xs, &nb).unwrap().particles[(0, 1)];
            assert!(got.is_finite());
            assert!(got > last);
            last = got;
        }
    }

    #[test]
    fn extreme_responses_stay_finite() {
        let (h, s, basis, x) = model(7, 2);
        let y = DMatrix::from_fn(x.nrows(), 2, |i, _| if i % 2 == 0 { 1e9 } else { -1e9 });
        let adj = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
        let p = adj.predict(&DVector::from_vec(vec![0.0, 0.0]), 6, PointEstimate::Median).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    /// Kolmogorov–Smirnov statistic of a sample against a CDF.
    fn ks_stat(mut v: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn particles_follow_target_marginal() {
        // Training responses are drawn from the model itself, so each
        // adjusted particle is an exact draw from the marginal at x*.
        let k = 50;
        // Stephens' finite-sample form of the 1% critical value.
        let crit = 1.628 / ((k as f64).sqrt() + 0.12 + 0.11 / (k as f64).sqrt());
        let mut passes = 0;
        for seed in 0..20u64 {
            let (h, s, basis, x) = model(100 + seed, 2);
            let mut rng = seeded_rng(200 + seed);
            let rows: Vec<DVector<f64>> = (0..x.nrows())
                .map(|i| {
                    predictive_at(&x.row(i).transpose(), &s, &h, &basis)
                        .unwrap()
                        .sample(&mut rng)
                })
                .collect();
            let y = DMatrix::from_fn(x.nrows(), 2, |i, l| rows[i][l]);
            let adj = Adjuster::new(&s, &h, &basis, &x, &y).unwrap();
            let xs = DVector::from_vec(vec![0.5, -0.5]);
            let p = adj.adjust(&xs, &adj.neighbors(&xs, k).unwrap()).unwrap();
            let target = predictive_at(&xs, &s, &h, &basis).unwrap();
            let ok = (0..2).all(|l| {
                let d = ks_stat(p.particles.column(l).iter().copied().collect(), |v| {
                    target.marginal_cdf(l, v).unwrap()
                });
                d < crit
            });
            passes += ok as usize;
        }
        assert!(passes >= 18, "{passes}/20 seeds passed");
    }

    #[test]
    fn median_and_mean_estimates() {
        let p = AdjustedParticles {
            particles: DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 10.0, 3.0]),
            neighbor_indices: vec![0, 1, 2, 3],
            distances: vec![0.0; 4],
        };
        assert_abs_diff_eq!(point_estimate(&p, PointEstimate::Mean)[0], 4.0);
        assert_abs_diff_eq!(point_estimate(&p, PointEstimate::Median)[0], 2.5);
    }
}
