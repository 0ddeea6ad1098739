//! Building energy benchmark: a surrogate of the 768-row heating/cooling
//! load data and the train/test protocol run on it.
//!
//! The surrogate keeps the full factorial covariate design of the original
//! (12 building shapes, 4 orientations, 16 glazing configurations, in the
//! original row order). Loads come from a fixed smooth formula plus seeded
//! noise, so only the design is faithful, not the load values. A real copy
//! of the data can be used instead through [`load_or_surrogate`].

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::{BasisMap, BasisOptions, Standardizer};
use crate::batchvb::{fit_batch, BatchOptions};
use crate::data::{ingest_csv, insample_fit, metrics, Dataset, Metrics};
use crate::error::Result;
use crate::model::Hyperparameters;
use crate::numstat::{seeded_rng, InvGammaParams};
use crate::predictive::predict_means;
use crate::regadjust::{Adjuster, PointEstimate};
use crate::vsugs::{fit_online, OnlineOptions};

/// Relative compactness, surface area, wall area, roof area, overall height.
const SHAPES: [[f64; 5]; 12] = [
    [0.98, 514.5, 294.0, 110.25, 7.0],
    [0.90, 563.5, 318.5, 122.5, 7.0],
    [0.86, 588.0, 294.0, 147.0, 7.0],
    [0.82, 612.5, 318.5, 147.0, 7.0],
    [0.79, 637.0, 343.0, 147.0, 7.0],
    [0.76, 661.5, 416.5, 122.5, 7.0],
    [0.74, 686.0, 245.0, 220.5, 3.5],
    [0.71, 710.5, 269.5, 220.5, 3.5],
    [0.69, 735.0, 294.0, 220.5, 3.5],
    [0.66, 759.5, 318.5, 220.5, 3.5],
    [0.64, 784.0, 343.0, 220.5, 3.5],
    [0.62, 808.5, 367.5, 220.5, 3.5],
];

pub const COVARIATE_NAMES: [&str; 8] = ["X1", "X2", "X3", "X4", "X5", "X6", "X7", "X8"];
pub const RESPONSE_NAMES: [&str; 2] = ["Y1", "Y2"];
pub const SURROGATE_SEED: u64 = 2012;

/// The covariate design in original row order: glazing configuration
/// outermost, then shape, then orientation 2..=5.
pub fn design() -> DMatrix<f64> {
    let mut glazing = vec![(0.0, 0.0)];
    for area in [0.1, 0.25, 0.4] {
        for dist in 1..=5 {
            glazing.push((area, dist as f64));
        }
    }
    let mut rows = Vec::with_capacity(768 * 8);
    for &(area, dist) in &glazing {
        for s in &SHAPES {
            for orient in 2..=5 {
                rows.extend_from_slice(s);
                rows.extend_from_slice(&[orient as f64, area, dist]);
            }
        }
    }
    DMatrix::from_row_slice(rows.len() / 8, 8, &rows)
}

/// Heating and cooling loads for one design row, before noise.
fn loads(x: &[f64]) -> (f64, f64) {
    let (rc, sa, oh, orient, area, dist) = (x[0], x[1], x[4], x[5], x[6], x[7]);
    let tall = oh > 5.0;
    // Loss through the envelope grows with surface area; tall buildings
    // have more conditioned volume.
    let envelope = (sa - 500.0) / 300.0;
    let (mut hl, mut cl) = if tall {
        (14.0 + 9.0 * envelope - 60.0 * (rc - 0.8).powi(2), 21.0 + 8.0 * envelope)
    } else {
        (6.0 + 2.0 * envelope, 10.5 + 2.5 * envelope)
    };
    let spread = if dist > 0.0 { 1.0 + 0.04 * (dist - 3.0) } else { 1.0 };
    hl += area * if tall { 28.0 } else { 14.0 } * spread;
    cl += area * if tall { 22.0 } else { 11.0 } * spread;
    let facing = (orient * std::f64::consts::FRAC_PI_2).sin();
    cl += if tall { 0.8 } else { 0.3 } * facing;
    (hl, cl)
}

/// The 768-row surrogate data set.
pub fn surrogate() -> Dataset {
    let x = design();
    let mut rng = seeded_rng(SURROGATE_SEED);
    let mut y = DMatrix::zeros(x.nrows(), 2);
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let (hl, cl) = loads(&row);
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        y[(i, 0)] = hl + 0.5 * z1;
        y[(i, 1)] = cl + 0.6 * (0.7 * z1 + 0.714_142_842_854_285 * z2);
    }
    Dataset {
        x,
        y,
        covariate_names: COVARIATE_NAMES.map(String::from).to_vec(),
        response_names: RESPONSE_NAMES.map(String::from).to_vec(),
    }
}

/// The CSV named by the `ENERGY_CSV` environment variable (responses
/// `Y1,Y2`), or the surrogate when unset.
pub fn load_or_surrogate() -> Result<(Dataset, bool)> {
    match std::env::var_os("ENERGY_CSV") {
        Some(p) => Ok((ingest_csv(p, "Y1,Y2")?, true)),
        None => Ok((surrogate(), false)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProtocol {
    pub test_count: usize,
    pub basis_count: usize,
    pub trunc: usize,
    pub alpha: f64,
    pub warm_count: usize,
    pub batch_iterations: usize,
    pub k_neighbors: usize,
    pub omega_prior: InvGammaParams,
    pub seed: u64,
}

impl Default for EnergyProtocol {
    fn default() -> Self {
        Self {
            test_count: 100,
            basis_count: 200,
            trunc: 10,
            alpha: 3.0,
            warm_count: 200,
            batch_iterations: 100,
            k_neighbors: 50,
            omega_prior: InvGammaParams {
                shape: 20.0,
                rate: 0.5,
            },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub batch_insample: Metrics,
    pub online_insample: Metrics,
    pub batch_test: Metrics,
    pub online_test: Metrics,
    pub adjusted_test: Metrics,
    pub timings: Vec<(&'static str, Duration)>,
}

/// Seeded uniform choice of test rows; the rest keep their original order.
pub fn split(n: usize, test_count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let mut test = index::sample(&mut rng, n, test_count).into_vec();
    test.sort_unstable();
    let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
    (train, test)
}

fn standardize_responses(s: &Standardizer, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    s.apply_rows(y)
}

/// Run the full protocol. All metrics are on responses standardized with
/// the training mean and sd.
pub fn run(data: &Dataset, p: &EnergyProtocol) -> Result<EnergyReport> {
    let mut timings = Vec::new();
    let (train_idx, test_idx) = split(data.rows(), p.test_count, p.seed);
    let train = data.select(&train_idx);
    let test = data.select(&test_idx);
    let ystd = Standardizer::fit(&train.y)?;
    let ytrain = standardize_responses(&ystd, &train.y)?;
    let ytest = standardize_responses(&ystd, &test.y)?;

    let clock = Instant::now();
    let mut rng = seeded_rng(p.seed);
    let opts = BasisOptions {
        basis_count: p.basis_count,
        ..BasisOptions::default()
    };
    let basis = BasisMap::fit(&train.x, opts, &mut rng)?;
    let etrain = basis.design_matrix(&train.x)?;
    let etest = basis.design_matrix(&test.x)?;
    let mut hyper = Hyperparameters::with_defaults(2, p.basis_count, p.trunc, p.alpha);
    hyper.set_omega_priors(p.omega_prior.shape, p.omega_prior.rate);
    timings.push(("basis", clock.elapsed()));

    let clock = Instant::now();
    let batch_opts = BatchOptions {
        max_iter: p.batch_iterations,
        tol: 0.0,
        seed: p.seed,
    };
    let batch = fit_batch(&etrain, &ytrain, &hyper, batch_opts)?;
    timings.push(("batch", clock.elapsed()));

    let clock = Instant::now();
    let online_opts = OnlineOptions {
        warm_count: p.warm_count.min(train.rows()),
        batch: batch_opts,
        ..OnlineOptions::default()
    };
    let online = fit_online(&etrain, &ytrain, &hyper, online_opts)?;
    timings.push(("online", clock.elapsed()));

    let clock = Instant::now();
    let batch_insample = metrics(&ytrain, &insample_fit(&batch.state, Some(&batch.alloc.q), &etrain)?)?;
    let online_insample = metrics(&ytrain, &insample_fit(&online.state, Some(&online.allocations), &etrain)?)?;
    let batch_test = metrics(&ytest, &predict_means(&etest, &batch.state, &hyper)?)?;
    let online_test = metrics(&ytest, &predict_means(&etest, &online.state, &hyper)?)?;
    timings.push(("predict", clock.elapsed()));

    let clock = Instant::now();
    let adj = Adjuster::new(&online.state, &hyper, &basis, &train.x, &ytrain)?.with_source_cdfs()?;
    let adjusted = adj.predict_rows(&test.x, p.k_neighbors, PointEstimate::Mean)?;
    let adjusted_test = metrics(&ytest, &adjusted)?;
    timings.push(("adjust", clock.elapsed()));

    Ok(EnergyReport {
        batch_insample,
        online_insample,
        batch_test,
        online_test,
        adjusted_test,
        timings,
    })
}
