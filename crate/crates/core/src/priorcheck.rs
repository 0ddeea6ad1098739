//! Screening priors for weak informativity.
//!
//! Statistics are simulated under a pseudo-prior over hyperparameters `λ`,
//! an MDP regression of statistic on `λ` is fitted once, and for every grid
//! point the nearest simulations are adjusted to that `λ`. A kernel density
//! estimate of the adjusted sample gives prior-predictive conflict p-values
//! and the degree of weak informativity `ζ_γ`.
//!
//! The bioassay logistic-regression example lives here as well.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;

use crate::basis::{BasisMap, BasisOptions};
use crate::error::{Error, Result};
use crate::model::{Hyperparameters, VariationalState};
use crate::numstat::{seeded_rng, stream_rng, InvGammaParams, SeededRng};
use crate::regadjust::Adjuster;
use crate::vsugs::{fit_online, OnlineOptions};

/// Product-Gaussian kernel density estimate with per-dimension Silverman
/// bandwidth `1.06 σ̂ n^{-1/5}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    points: DMatrix<f64>,
    bandwidth: Vec<f64>,
    norm: f64,
}

impl Kde {
    pub fn fit(points: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = points.shape();
        if n < 2 {
            return Err(Error::DegenerateSample(format!("KDE needs at least 2 points, got {n}")));
        }
        if !(1..=3).contains(&d) {
            return Err(Error::DegenerateSample(format!("KDE supports 1 to 3 dimensions, got {d}")));
        }
        let factor = 1.06 * (n as f64).powf(-0.2);
        let mut bandwidth = Vec::with_capacity(d);
        for (c, col) in points.column_iter().enumerate() {
            let sd = col.variance().sqrt() * (n as f64 / (n - 1) as f64).sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::DegenerateSample(format!(
                    "KDE dimension {c} has zero variance"
                )));
            }
            bandwidth.push(factor * sd);
        }
        let norm = bandwidth
            .iter()
            .map(|h| 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt()))
            .product::<f64>();
        Ok(Self {
            points: points.clone(),
            bandwidth,
            norm,
        })
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    fn kernel_sum(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let d = self.bandwidth.len();
        let mut total = 0.0;
        for i in 0..self.points.nrows() {
            if Some(i) == skip {
                continue;
            }
            let mut q = 0.0;
            for c in 0..d {
                let z = (x[c] - self.points[(i, c)]) / self.bandwidth[c];
                q += z * z;
            }
            total += (-0.5 * q).exp();
        }
        total
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.norm * self.kernel_sum(x, None) / self.points.nrows() as f64
    }

    /// Densities at each row of `eval`.
    pub fn densities(&self, eval: &DMatrix<f64>) -> Vec<f64> {
        (0..eval.nrows())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = eval.row(i).iter().copied().collect();
                self.density(&x)
            })
            .collect()
    }

    /// Leave-one-out density at every sample point.
    pub fn loo_densities(&self) -> Vec<f64> {
        let n = self.points.nrows();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = self.points.row(i).iter().copied().collect();
                self.norm * self.kernel_sum(&x, Some(i)) / (n - 1) as f64
            })
            .collect()
    }
}

/// `P̂_j = (1/n) #{i : p̂_i ≤ p̂(S⁰_j)}`. Only the ordering of the density
/// values matters.
pub fn pvalues_from_densities(sample: &[f64], baseline: &[f64]) -> Vec<f64> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    baseline
        .iter()
        .map(|&b| sorted.partition_point(|&s| s <= b) as f64 / n)
        .collect()
}

/// Conflict p-values of each baseline row relative to the density of
/// `adjusted`.
pub fn conflict_pvalues(adjusted: &DMatrix<f64>, baseline: &DMatrix<f64>) -> Result<Vec<f64>> {
    if baseline.nrows() == 0 {
        return Err(Error::DegenerateSample("baseline sample is empty".into()));
    }
    if baseline.ncols() != adjusted.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "baseline has {} columns, sample has {}",
            baseline.ncols(),
            adjusted.ncols()
        )));
    }
    let kde = Kde::fit(adjusted)?;
    Ok(pvalues_from_densities(&kde.loo_densities(), &kde.densities(baseline)))
}

/// Lower empirical quantile: the `⌈γn⌉`-th smallest value.
pub fn empirical_quantile(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::DegenerateSample("quantile of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((gamma * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// `ζ_γ = 0` when `q_γ > p_γ`, else `1 − q_γ/p_γ`, with `p_γ` the
/// γ-quantile of the baseline p-values and `q_γ` the fraction of alternative
/// p-values at or below it.
pub fn weak_informativity_zeta(baseline: &[f64], alternative: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParams(format!("gamma {gamma} outside (0, 1)")));
    }
    if alternative.is_empty() {
        return Err(Error::DegenerateSample("alternative p-values are empty".into()));
    }
    let p = empirical_quantile(baseline, gamma)?;
    if !(p > 0.0) {
        return Err(Error::DegenerateBaselineQuantile);
    }
    let q = alternative.iter().filter(|&&a| a <= p).count() as f64 / alternative.len() as f64;
    Ok(if q > p { 0.0 } else { 1.0 - q / p })
}

/// Where the base prior's own p-values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Same adjusted-regression route as the grid points.
    #[default]
    Adjusted,
    /// Direct simulation of this many statistics at the base prior.
    Direct(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    pub grid: Vec<DVector<f64>>,
    pub baseline: DVector<f64>,
    pub gamma: f64,
    pub k_neighbors: usize,
    /// Number of statistics drawn at the base prior for evaluating p-values.
    pub baseline_count: usize,
    pub baseline_mode: BaselineMode,
    pub seed: u64,
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidParams("scan grid is empty".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParams(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.k_neighbors < 2 {
            return Err(Error::InvalidParams("need k_neighbors >= 2".into()));
        }
        Ok(())
    }
}

/// Regular grid over a box, `counts[c]` points per axis including both ends.
pub fn regular_grid(lo: &[f64], hi: &[f64], counts: &[usize]) -> Vec<DVector<f64>> {
    let axes: Vec<Vec<f64>> = (0..lo.len())
        .map(|c| {
            let k = counts[c];
            (0..k)
                .map(|i| {
                    if k == 1 {
                        0.5 * (lo[c] + hi[c])
                    } else {
                        lo[c] + (hi[c] - lo[c]) * i as f64 / (k - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(DVector::from_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub lambda: DVector<f64>,
    pub zeta: f64,
    pub pvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub points: Vec<GridResult>,
    pub baseline_pvalues: Vec<f64>,
    pub p_gamma: f64,
}

/// Draw `count` statistics at `lambda`, one generator stream per draw.
pub fn simulate_at<F>(simulate: &F, lambda: &DVector<f64>, count: usize, seed: u64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, &mut SeededRng) -> Result<DVector<f64>> + Sync,
{
    let rows: Vec<DVector<f64>> = (0..count)
        .into_par_iter()
        .map(|i| simulate(lambda, &mut stream_rng(seed, i as u64)))
        .collect::<Result<_>>()?;
    stack_rows(&rows)
}

fn stack_rows(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::DimensionMismatch("simulator returned rows of different length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), m, |i, l| rows[i][l]))
}

/// Run the scan over `cfg.grid` with a fitted regression of statistic on
/// hyperparameter. Grid points run in parallel and results do not depend on
/// scheduling.
pub fn prior_scan<F>(simulate: &F, cfg: &ScanConfig, adjuster: &Adjuster) -> Result<ScanResult>
where
    F: Fn(&DVector<f64>, &mut SeededRng) -> Result<DVector<f64>> + Sync,
{
    cfg.validate()?;
    if cfg.baseline_count == 0 {
        return Err(Error::InvalidParams("baseline sample size must be positive".into()));
    }
    let baseline_sample = simulate_at(simulate, &cfg.baseline, cfg.baseline_count, cfg.seed)?;
    let direct = match cfg.baseline_mode {
        BaselineMode::Adjusted => None,
        BaselineMode::Direct(count) => Some(simulate_at(simulate, &cfg.baseline, count, cfg.seed ^ 0x5eed_ba5e)?),
    };
    scan_with_samples(&baseline_sample, direct.as_ref(), cfg, adjuster)
}

/// As [`prior_scan`] with the baseline statistics supplied. When `direct` is
/// given, the base prior's p-values use it as the reference sample instead
/// of the adjusted route; `cfg.baseline_mode` and `cfg.baseline_count` are
/// not consulted.
pub fn scan_with_samples(
    baseline_sample: &DMatrix<f64>,
    direct: Option<&DMatrix<f64>>,
    cfg: &ScanConfig,
    adjuster: &Adjuster,
) -> Result<ScanResult> {
    cfg.validate()?;
    let pvalues_at = |lambda: &DVector<f64>| -> Result<Vec<f64>> {
        let nb = adjuster.neighbors(lambda, cfg.k_neighbors)?;
        let particles = adjuster.adjust(lambda, &nb)?.particles;
        conflict_pvalues(&particles, baseline_sample)
    };
    let baseline_pvalues = match direct {
        None => pvalues_at(&cfg.baseline)?,
        Some(d) => conflict_pvalues(d, baseline_sample)?,
    };
    let p_gamma = empirical_quantile(&baseline_pvalues, cfg.gamma)?;
    let points = cfg
        .grid
        .par_iter()
        .map(|lambda| {
            let pvalues = pvalues_at(lambda)?;
            let zeta = weak_informativity_zeta(&baseline_pvalues, &pvalues, cfg.gamma)?;
            Ok(GridResult {
                lambda: lambda.clone(),
                zeta,
                pvalues,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScanResult {
        points,
        baseline_pvalues,
        p_gamma,
    })
}

/// Simulated `(λ, S)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub lambdas: DMatrix<f64>,
    pub stats: DMatrix<f64>,
}

/// Draw `count` hyperparameters uniformly on the box `[lo, hi]` and one
/// statistic for each.
pub fn simulate_corpus<F>(simulate: &F, lo: &[f64], hi: &[f64], count: usize, seed: u64) -> Result<Corpus>
where
    F: Fn(&DVector<f64>, &mut SeededRng) -> Result<DVector<f64>> + Sync,
{
    if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(Error::InvalidParams("pseudo-prior box needs lo < hi in every axis".into()));
    }
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let lambda = DVector::from_fn(lo.len(), |c, _| rng.random_range(lo[c]..hi[c]));
            let s = simulate(&lambda, &mut rng)?;
            Ok((lambda, s))
        })
        .collect::<Result<_>>()?;
    let (lambdas, stats): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Corpus {
        lambdas: stack_rows(&lambdas)?,
        stats: stack_rows(&stats)?,
    })
}

/// Model settings for the statistic-on-hyperparameter regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanModelSettings {
    pub basis_count: usize,
    pub trunc: usize,
    pub alpha: f64,
    pub warm_count: usize,
    pub tau_prior: InvGammaParams,
    pub omega_prior: InvGammaParams,
    /// Covariates are used on their natural scale unless set.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ScanModelSettings {
    fn default() -> Self {
        Self {
            basis_count: 50,
            trunc: 4,
            alpha: 100.0,
            warm_count: 500,
            tau_prior: InvGammaParams {
                shape: 5.0,
                rate: 0.5,
            },
            omega_prior: InvGammaParams {
                shape: 5.0,
                rate: 0.5,
            },
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanModel {
    pub hyper: Hyperparameters,
    pub state: VariationalState,
    pub basis: BasisMap,
}

/// Fit the online regression of `corpus.stats` on `corpus.lambdas`. The
/// inverse-Wishart prior keeps its defaults `S = I + 𝟙𝟙ᵀ/m`, `ν = m + 1`.
pub fn fit_scan_model(corpus: &Corpus, settings: &ScanModelSettings) -> Result<ScanModel> {
    let mut rng = seeded_rng(settings.seed);
    let opts = BasisOptions {
        basis_count: settings.basis_count,
        standardize: settings.standardize,
        ..BasisOptions::default()
    };
    let basis = BasisMap::fit(&corpus.lambdas, opts, &mut rng)?;
    let mut hyper = Hyperparameters::with_defaults(
        corpus.stats.ncols(),
        settings.basis_count,
        settings.trunc,
        settings.alpha,
    );
    hyper.tau_prior = settings.tau_prior;
    hyper.set_omega_priors(settings.omega_prior.shape, settings.omega_prior.rate);
    let design = basis.design_matrix(&corpus.lambdas)?;
    let mut online = OnlineOptions {
        warm_count: settings.warm_count.min(corpus.stats.nrows()),
        ..OnlineOptions::default()
    };
    online.batch.seed = settings.seed;
    let fit = fit_online(&design, &corpus.stats, &hyper, online)?;
    Ok(ScanModel {
        hyper,
        state: fit.state,
        basis,
    })
}

/// Racine et al. log doses.
pub const BIOASSAY_LOG_DOSE: [f64; 4] = [-0.86, -0.30, -0.05, 0.73];
pub const BIOASSAY_TRIALS: u32 = 5;
pub const BIOASSAY_MODE_PRIOR_SD: f64 = 10.0;
pub const BIOASSAY_BASE_PRIOR: [f64; 2] = [10.0, 2.5];
pub const BIOASSAY_CHECK_PRIOR: [f64; 2] = [4.0, 4.0];
pub const BIOASSAY_PSEUDO_LO: [f64; 2] = [0.1, 0.1];
pub const BIOASSAY_PSEUDO_HI: [f64; 2] = [10.0, 20.0];

/// Log doses centered and scaled to sample sd 0.5.
pub fn bioassay_doses() -> [f64; 4] {
    let n = BIOASSAY_LOG_DOSE.len() as f64;
    let mean = BIOASSAY_LOG_DOSE.iter().sum::<f64>() / n;
    let var = BIOASSAY_LOG_DOSE.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    BIOASSAY_LOG_DOSE.map(|d| 0.5 * (d - mean) / var.sqrt())
}

/// How fitted coefficients become the summary probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatTransform {
    /// `1 / (1 + exp(−ĉ₀ + ĉ₁x))`
    #[default]
    AsPrinted,
    /// `1 / (1 + exp(−(ĉ₀ + ĉ₁x)))`
    Conventional,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Penalized logistic log posterior under independent `N(0, sd²)` priors.
pub fn bioassay_log_posterior(c: [f64; 2], y: &[u32], trials: &[u32], x: &[f64], prior_sd: f64) -> f64 {
    let mut f = -(c[0] * c[0] + c[1] * c[1]) / (2.0 * prior_sd * prior_sd);
    for i in 0..x.len() {
        let eta = c[0] + c[1] * x[i];
        f += y[i] as f64 * eta - trials[i] as f64 * softplus(eta);
    }
    f
}

pub fn bioassay_gradient(c: [f64; 2], y: &[u32], trials: &[u32], x: &[f64], prior_sd: f64) -> [f64; 2] {
    let v = prior_sd * prior_sd;
    let mut g = [-c[0] / v, -c[1] / v];
    for i in 0..x.len() {
        let r = y[i] as f64 - trials[i] as f64 * sigmoid(c[0] + c[1] * x[i]);
        g[0] += r;
        g[1] += r * x[i];
    }
    g
}

/// Posterior mode by Newton–Raphson with step halving.
pub fn bioassay_posterior_mode(y: &[u32], trials: &[u32], x: &[f64], prior_sd: f64) -> Result<[f64; 2]> {
    if y.len() != x.len() || trials.len() != x.len() {
        return Err(Error::DimensionMismatch("counts, trials and doses differ in length".into()));
    }
    if y.iter().zip(trials).any(|(a, b)| a > b) {
        return Err(Error::InvalidParams("more successes than trials".into()));
    }
    let v = prior_sd * prior_sd;
    let mut c = [0.0, 0.0];
    let mut f = bioassay_log_posterior(c, y, trials, x, prior_sd);
    for _ in 0..100 {
        let g = bioassay_gradient(c, y, trials, x, prior_sd);
        if g[0].abs().max(g[1].abs()) < 1e-10 {
            return Ok(c);
        }
        // Negative Hessian, SPD thanks to the prior.
        let (mut h00, mut h01, mut h11) = (1.0 / v, 0.0, 1.0 / v);
        for i in 0..x.len() {
            let p = sigmoid(c[0] + c[1] * x[i]);
            let w = trials[i] as f64 * p * (1.0 - p);
            h00 += w;
            h01 += w * x[i];
            h11 += w * x[i] * x[i];
        }
        let det = h00 * h11 - h01 * h01;
        let step = [(h11 * g[0] - h01 * g[1]) / det, (h00 * g[1] - h01 * g[0]) / det];
        let mut t = 1.0;
        loop {
            let next = [c[0] + t * step[0], c[1] + t * step[1]];
            let fn_ = bioassay_log_posterior(next, y, trials, x, prior_sd);
            // Near the optimum roundoff can hide a true increase.
            if fn_ >= f - 1e-12 * (1.0 + f.abs()) || t < 1e-12 {
                c = next;
                f = fn_;
                break;
            }
            t *= 0.5;
        }
    }
    let g = bioassay_gradient(c, y, trials, x, prior_sd);
    if g[0].abs().max(g[1].abs()) < 1e-10 {
        Ok(c)
    } else {
        Err(Error::Convergence(format!(
            "posterior mode not found in 100 Newton steps (gradient {:e})",
            g[0].abs().max(g[1].abs())
        )))
    }
}

/// The bioassay prior-predictive simulator for `λ = (σ₀, σ₁)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bioassay {
    pub doses: [f64; 4],
    pub transform: StatTransform,
}

impl Default for Bioassay {
    fn default() -> Self {
        Self {
            doses: bioassay_doses(),
            transform: StatTransform::AsPrinted,
        }
    }
}

impl Bioassay {
    /// `(p̂₂, p̂₃)` from fitted coefficients.
    pub fn statistic(&self, c: [f64; 2]) -> DVector<f64> {
        DVector::from_fn(2, |k, _| {
            let x = self.doses[k + 1];
            match self.transform {
                StatTransform::AsPrinted => 1.0 / (1.0 + (-c[0] + c[1] * x).exp()),
                StatTransform::Conventional => sigmoid(c[0] + c[1] * x),
            }
        })
    }

    pub fn draw_counts<R: Rng + ?Sized>(&self, sigma: &DVector<f64>, rng: &mut R) -> Result<[u32; 4]> {
        if sigma.len() != 2 || !(sigma[0] > 0.0 && sigma[1] > 0.0) {
            return Err(Error::InvalidParams(format!(
                "bioassay prior needs two positive sds, got {:?}",
                sigma.as_slice()
            )));
        }
        let c0 = Normal::new(0.0, sigma[0]).expect("positive sd").sample(rng);
        let c1 = Normal::new(0.0, sigma[1]).expect("positive sd").sample(rng);
        let mut y = [0u32; 4];
        for (i, yi) in y.iter_mut().enumerate() {
            let p = sigmoid(c0 + c1 * self.doses[i]);
            *yi = Binomial::new(BIOASSAY_TRIALS as u64, p)
                .expect("probability in [0, 1]")
                .sample(rng) as u32;
        }
        Ok(y)
    }

    pub fn simulate<R: Rng + ?Sized>(&self, sigma: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let y = self.draw_counts(sigma, rng)?;
        let c = bioassay_posterior_mode(&y, &[BIOASSAY_TRIALS; 4], &self.doses, BIOASSAY_MODE_PRIOR_SD)?;
        Ok(self.statistic(c))
    }
}

/// Desk-scale settings for the bioassay screen.
#[derive(Debug, Clone, PartialEq)]
pub struct BioassayScanSettings {
    pub simulations: usize,
    pub grid_counts: [usize; 2],
    pub k_neighbors: usize,
    pub baseline_count: usize,
    pub gamma: f64,
    pub transform: StatTransform,
    pub model: ScanModelSettings,
    pub seed: u64,
}

impl Default for BioassayScanSettings {
    fn default() -> Self {
        Self {
            simulations: 50_000,
            grid_counts: [20, 20],
            k_neighbors: 1000,
            baseline_count: 1000,
            gamma: 0.05,
            transform: StatTransform::AsPrinted,
            model: ScanModelSettings::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BioassayScan {
    /// Grid results, followed by the check prior `(4, 4)` as the last entry.
    pub result: ScanResult,
    pub corpus: Corpus,
    pub model: ScanModel,
    pub timings: Vec<(&'static str, std::time::Duration)>,
}

impl BioassayScan {
    pub fn check_point(&self) -> &GridResult {
        self.result.points.last().expect("check point is always present")
    }
}

/// Simulate, fit and scan the bioassay example end to end.
pub fn run_bioassay_scan(settings: &BioassayScanSettings) -> Result<BioassayScan> {
    use std::time::Instant;
    let sim_model = Bioassay {
        transform: settings.transform,
        ..Bioassay::default()
    };
    let simulate = |l: &DVector<f64>, r: &mut SeededRng| sim_model.simulate(l, r);
    let mut timings = Vec::new();

    let clock = Instant::now();
    let corpus = simulate_corpus(
        &simulate,
        &BIOASSAY_PSEUDO_LO,
        &BIOASSAY_PSEUDO_HI,
        settings.simulations,
        settings.seed,
    )?;
    timings.push(("simulate", clock.elapsed()));

    let clock = Instant::now();
    let model_settings = ScanModelSettings {
        seed: settings.seed,
        ..settings.model.clone()
    };
    let model = fit_scan_model(&corpus, &model_settings)?;
    timings.push(("fit", clock.elapsed()));

    let clock = Instant::now();
    let adjuster = Adjuster::new(&model.state, &model.hyper, &model.basis, &corpus.lambdas, &corpus.stats)?
        .with_source_cdfs()?;
    let mut grid = regular_grid(&BIOASSAY_PSEUDO_LO, &BIOASSAY_PSEUDO_HI, &settings.grid_counts);
    grid.push(DVector::from_row_slice(&BIOASSAY_CHECK_PRIOR));
    let cfg = ScanConfig {
        grid,
        baseline: DVector::from_row_slice(&BIOASSAY_BASE_PRIOR),
        gamma: settings.gamma,
        k_neighbors: settings.k_neighbors,
        baseline_count: settings.baseline_count,
        baseline_mode: BaselineMode::Adjusted,
        seed: settings.seed.wrapping_add(1),
    };
    let result = prior_scan(&simulate, &cfg, &adjuster)?;
    timings.push(("scan", clock.elapsed()));
    Ok(BioassayScan {
        result,
        corpus,
        model,
        timings,
    })
}
