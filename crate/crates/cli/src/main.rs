//! `mdpreg`: fit, predict, adjust and evaluate matrix-variate DP mixture
//! regressions from CSV files, and run the weakly-informative prior screen.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use mdpreg::basis::{BandwidthRule, BasisMap, BasisOptions, KernelKind};
use mdpreg::batchvb::{fit_batch, BatchOptions};
use mdpreg::data::{ingest_csv, metrics, read_matrix_csv, split_table, write_matrix_csv, Dataset};
use mdpreg::model::{load_state, save_state, Hyperparameters, SavedModel};
use mdpreg::predictive::predictive_mixture;
use mdpreg::priorcheck::{
    fit_scan_model, regular_grid, run_bioassay_scan, scan_with_samples, BioassayScanSettings, Corpus,
    ScanConfig, ScanModelSettings, ScanResult, StatTransform,
};
use mdpreg::regadjust::{Adjuster, PointEstimate};
use mdpreg::vsugs::{fit_online, OnlineOptions, TauRateMode};

use config::{list, Resolver};

#[derive(Parser, Debug)]
#[command(name = "mdpreg", version, about = "Matrix-variate DP mixture regression")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plain-text key = value settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Batch variational fit.
    FitBatch(FitArgs),
    /// Batch warm start followed by one online pass.
    FitOnline(FitArgs),
    /// Predictive means (and quantiles) at new covariates.
    Predict(PredictArgs),
    /// Regression-adjusted predictions.
    Adjust(AdjustArgs),
    /// RMSE and MAPE of predictions against the truth.
    Evaluate(EvaluateArgs),
    /// Weak-informativity scan over a grid of hyperparameters.
    PriorScan(ScanArgs),
    /// The bioassay screen at desk scale.
    DemoBioassay(DemoArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Response columns by name or zero-based index, comma separated.
    #[arg(long)]
    responses: Option<String>,
    /// Number of kernel basis functions N.
    #[arg(long)]
    basis: Option<usize>,
    /// Truncation level T.
    #[arg(long)]
    trunc: Option<usize>,
    /// Dirichlet process concentration α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Observations used for the batch warm start (fit-online only).
    #[arg(long)]
    warm: Option<usize>,
    /// Batch iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Relative change that stops the batch iterations.
    #[arg(long)]
    tol: Option<f64>,
    /// exponential | gaussian-sq
    #[arg(long)]
    kernel: Option<String>,
    /// accumulate | recompute
    #[arg(long)]
    tau_mode: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Saved model state.
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV of covariates to predict at.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Columns of the data file to ignore (e.g. responses).
    #[arg(long)]
    drop: Option<String>,
    /// Marginal quantile levels to add, comma separated.
    #[arg(long)]
    quantiles: Option<String>,
}

#[derive(Args, Debug)]
struct AdjustArgs {
    /// Saved model state.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    /// CSV of covariates to predict at.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    responses: Option<String>,
    /// Nearest training points to adjust.
    #[arg(long)]
    k: Option<usize>,
    /// mean | median
    #[arg(long)]
    estimate: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Truth columns to compare, by name or index; defaults to the
    /// prediction file's column names.
    #[arg(long)]
    columns: Option<String>,
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// "bioassay" or a CSV of simulated (hyperparameter, statistic) rows.
    #[arg(long)]
    simulator: Option<String>,
    /// For a CSV simulator: statistic columns.
    #[arg(long)]
    stats: Option<String>,
    /// For a CSV simulator: statistics drawn at the base prior.
    #[arg(long)]
    baseline_sample: Option<PathBuf>,
    /// Simulations from the pseudo-prior.
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Tail level γ for the degree of weak informativity.
    #[arg(long)]
    gamma: Option<f64>,
    /// Write the p-value samples here.
    #[arg(long)]
    pvalues: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// as-printed | conventional
    #[arg(long)]
    transform: Option<String>,
}

struct Timer(Vec<(&'static str, f64)>, Instant);

impl Timer {
    fn new() -> Self {
        Self(Vec::new(), Instant::now())
    }

    fn lap(&mut self, phase: &'static str) {
        self.0.push((phase, self.1.elapsed().as_secs_f64()));
        self.1 = Instant::now();
    }

    fn report(&self) {
        for (p, s) in &self.0 {
            eprintln!("timing {p}: {s:.3}s");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => Default::default(),
    };
    let mut r = Resolver::new(file);
    let seed = r.get("seed", cli.seed, 0u64)?;
    let out = r.optional("out", cli.out.as_ref().map(|p| p.display().to_string()))?;
    let mut timer = Timer::new();
    match cli.command {
        Command::FitBatch(a) => fit(&mut r, a, seed, out, false, &mut timer),
        Command::FitOnline(a) => fit(&mut r, a, seed, out, true, &mut timer),
        Command::Predict(a) => predict(&mut r, a, out, &mut timer),
        Command::Adjust(a) => adjust(&mut r, a, out, &mut timer),
        Command::Evaluate(a) => evaluate(&mut r, a, out, &mut timer),
        Command::PriorScan(a) => prior_scan(&mut r, a, seed, out, &mut timer),
        Command::DemoBioassay(a) => demo(&mut r, a, seed, out, &mut timer),
    }?;
    timer.report();
    Ok(())
}

fn print_config(r: &Resolver) {
    eprintln!("configuration:");
    eprint!("{}", r.echo());
    let unused = r.unused();
    if !unused.is_empty() {
        eprintln!("warning: unused config keys: {}", unused.join(", "));
    }
}

fn require_out(out: Option<String>) -> Result<PathBuf> {
    out.map(PathBuf::from).context("this command needs --out")
}

fn fit(r: &mut Resolver, a: FitArgs, seed: u64, out: Option<String>, online: bool, t: &mut Timer) -> Result<()> {
    let train: String = r.require("train", a.train.map(|p| p.display().to_string()))?;
    let responses: String = r.require("responses", a.responses)?;
    let basis_count = r.get("basis", a.basis, 50usize)?;
    let trunc = r.get("trunc", a.trunc, 10usize)?;
    let alpha = r.get("alpha", a.alpha, 1.0)?;
    let iters = r.get("iters", a.iters, 100usize)?;
    let tol = r.get("tol", a.tol, 1e-8)?;
    let kernel: KernelKind = r.get("kernel", a.kernel, "exponential".to_string())?.parse()?;
    let bandwidth: BandwidthRule = r.get("bandwidth-rule", None, "mean-distance".to_string())?.parse()?;
    let a_tau = r.get("a-tau", None, 5.0)?;
    let b_tau = r.get("b-tau", None, 0.5)?;
    let a_omega = r.get("a-omega", None, 20.0)?;
    let b_omega = r.get("b-omega", None, 0.5)?;
    let (warm, tau_mode) = if online {
        let warm = r.get("warm", a.warm, 200usize)?;
        let mode: TauRateMode = r.get("tau-mode", a.tau_mode, "accumulate".to_string())?.parse()?;
        (warm, mode)
    } else {
        (0, TauRateMode::Accumulate)
    };
    let out = require_out(out)?;
    print_config(r);

    let data = ingest_csv(&train, &responses)?;
    t.lap("ingest");
    let mut rng = mdpreg::numstat::seeded_rng(seed);
    let opts = BasisOptions {
        basis_count,
        kernel,
        bandwidth_rule: bandwidth,
        ..BasisOptions::default()
    };
    let basis = BasisMap::fit(&data.x, opts, &mut rng)?;
    let e = basis.design_matrix(&data.x)?;
    let mut hyper = Hyperparameters::with_defaults(data.y.ncols(), basis_count, trunc, alpha);
    hyper.tau_prior = mdpreg::numstat::InvGammaParams::new(a_tau, b_tau)?;
    hyper.set_omega_priors(a_omega, b_omega);
    hyper.validate(data.y.ncols())?;
    t.lap("basis");
    let batch = BatchOptions { max_iter: iters, tol, seed };
    let (state, allocations) = if online {
        let warm = warm.min(data.rows());
        let fit = fit_online(
            &e,
            &data.y,
            &hyper,
            OnlineOptions {
                warm_count: warm,
                batch,
                tau_mode,
                track_bound: false,
            },
        )?;
        t.lap("warm batch + online loop");
        (fit.state, fit.allocations)
    } else {
        let fit = fit_batch(&e, &data.y, &hyper, batch)?;
        eprintln!(
            "batch: {} iterations, converged = {}",
            fit.diagnostics.iterations(),
            fit.diagnostics.converged
        );
        t.lap("batch");
        (fit.state, fit.alloc.q)
    };
    eprintln!("occupied components: {}", state.occupied());
    let saved = SavedModel {
        hyper,
        state,
        basis,
        allocations: Some(allocations),
    };
    save_state(&saved, &out)?;
    t.lap("save");
    println!("wrote {}", out.display());
    Ok(())
}

fn covariates(path: &Path, drop: Option<&str>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (header, table) = read_matrix_csv(path)?;
    match drop {
        Some(spec) => {
            let d = split_table(&header, &table, spec)?;
            Ok((d.covariate_names, d.x))
        }
        None => Ok((header, table)),
    }
}

fn predict(r: &mut Resolver, a: PredictArgs, out: Option<String>, t: &mut Timer) -> Result<()> {
    let model: String = r.require("model", a.model.map(|p| p.display().to_string()))?;
    let data: String = r.require("data", a.data.map(|p| p.display().to_string()))?;
    let drop: Option<String> = r.optional("drop", a.drop)?;
    let levels: Vec<f64> = match r.optional::<String>("quantiles", a.quantiles)? {
        Some(s) => list(&s)?,
        None => Vec::new(),
    };
    let out = require_out(out)?;
    print_config(r);

    let saved = load_state(&model)?;
    let (_, x) = covariates(Path::new(&data), drop.as_deref())?;
    t.lap("ingest");
    let e = saved.basis.design_matrix(&x)?;
    let m = saved.state.response_dim();
    let cols = m * (1 + levels.len());
    let rows: Vec<Vec<f64>> = (0..e.nrows())
        .map(|i| -> Result<Vec<f64>> {
            let mix = predictive_mixture(&e.row(i).transpose(), &saved.state, &saved.hyper)?;
            let mut v: Vec<f64> = mix.mean()?.iter().copied().collect();
            for &u in &levels {
                for l in 0..m {
                    v.push(mix.marginal_quantile(l, u)?);
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let mut header: Vec<String> = (0..m).map(|l| format!("mean_{l}")).collect();
    for u in &levels {
        header.extend((0..m).map(|l| format!("q{u}_{l}")));
    }
    let table = DMatrix::from_fn(rows.len(), cols, |i, c| rows[i][c]);
    t.lap("predict");
    write_matrix_csv(&out, &header, &table)?;
    println!("wrote {} rows to {}", table.nrows(), out.display());
    Ok(())
}

fn adjust(r: &mut Resolver, a: AdjustArgs, out: Option<String>, t: &mut Timer) -> Result<()> {
    let model: String = r.require("model", a.model.map(|p| p.display().to_string()))?;
    let train: String = r.require("train", a.train.map(|p| p.display().to_string()))?;
    let test: String = r.require("test", a.test.map(|p| p.display().to_string()))?;
    let responses: String = r.require("responses", a.responses)?;
    let k = r.get("k", a.k, mdpreg::regadjust::DEFAULT_K)?;
    let est: PointEstimate = r.get("estimate", a.estimate, "mean".to_string())?.parse()?;
    let out = require_out(out)?;
    print_config(r);

    let saved = load_state(&model)?;
    let train: Dataset = ingest_csv(&train, &responses)?;
    let (test_header, test_table) = read_matrix_csv(&test)?;
    let x_test = if test_table.ncols() == train.x.ncols() {
        test_table
    } else {
        split_table(&test_header, &test_table, &responses)?.x
    };
    t.lap("ingest");
    let adj = Adjuster::new(&saved.state, &saved.hyper, &saved.basis, &train.x, &train.y)?;
    let pred = adj.predict_rows(&x_test, k, est)?;
    t.lap("adjust");
    write_matrix_csv(&out, &train.response_names, &pred)?;
    println!("wrote {} rows to {}", pred.nrows(), out.display());
    Ok(())
}

fn evaluate(r: &mut Resolver, a: EvaluateArgs, out: Option<String>, t: &mut Timer) -> Result<()> {
    let pred: String = r.require("pred", a.pred.map(|p| p.display().to_string()))?;
    let truth: String = r.require("truth", a.truth.map(|p| p.display().to_string()))?;
    let columns: Option<String> = r.optional("columns", a.columns)?;
    print_config(r);

    let (ph, p) = read_matrix_csv(&pred)?;
    let (th, tt) = read_matrix_csv(&truth)?;
    let truth_m = match columns {
        Some(spec) => split_table(&th, &tt, &spec)?.y,
        None if th == ph => tt,
        None if tt.ncols() == p.ncols() => tt,
        None => split_table(&th, &tt, &ph.join(","))
            .context("truth columns do not match prediction columns; pass --columns")?
            .y,
    };
    t.lap("ingest");
    let m = metrics(&truth_m, &p)?;
    println!("{:<10}{:>12}{:>12}{:>10}", "dimension", "RMSE", "MAPE", "skipped");
    for l in 0..m.rmse.len() {
        println!("{:<10}{:>12.6}{:>12.6}{:>10}", l, m.rmse[l], m.mape[l], m.mape_skipped[l]);
    }
    println!("{:<10}{:>12.6}{:>12.6}", "mean", m.mean_rmse, m.mean_mape);
    if let Some(out) = out {
        let mut rows: Vec<f64> = Vec::new();
        for l in 0..m.rmse.len() {
            rows.extend([l as f64, m.rmse[l], m.mape[l], m.mape_skipped[l] as f64]);
        }
        let table = DMatrix::from_row_slice(m.rmse.len(), 4, &rows);
        let header = ["dimension", "rmse", "mape", "mape_skipped"].map(String::from);
        write_matrix_csv(&out, &header, &table)?;
    }
    Ok(())
}

fn write_scan(out: &Path, pvalues: Option<&Path>, res: &ScanResult, names: &[String]) -> Result<()> {
    let p = names.len();
    let table = DMatrix::from_fn(res.points.len(), p + 1, |i, c| {
        if c < p {
            res.points[i].lambda[c]
        } else {
            res.points[i].zeta
        }
    });
    let mut header = names.to_vec();
    header.push("zeta".into());
    write_matrix_csv(out, &header, &table)?;
    if let Some(path) = pvalues {
        let mut rows: Vec<f64> = res.baseline_pvalues.iter().flat_map(|&v| [-1.0, v]).collect();
        for (i, g) in res.points.iter().enumerate() {
            rows.extend(g.pvalues.iter().flat_map(|&v| [i as f64, v]));
        }
        let table = DMatrix::from_row_slice(rows.len() / 2, 2, &rows);
        write_matrix_csv(path, &["point".into(), "pvalue".into()], &table)?;
    }
    Ok(())
}

fn scan_model_settings(r: &mut Resolver, seed: u64) -> Result<ScanModelSettings> {
    let d = ScanModelSettings::default();
    Ok(ScanModelSettings {
        basis_count: r.get("basis", None, d.basis_count)?,
        trunc: r.get("trunc", None, d.trunc)?,
        alpha: r.get("alpha", None, d.alpha)?,
        warm_count: r.get("warm", None, d.warm_count)?,
        seed,
        ..d
    })
}

fn prior_scan(r: &mut Resolver, a: ScanArgs, seed: u64, out: Option<String>, t: &mut Timer) -> Result<()> {
    let simulator = r.get("simulator", a.simulator, "bioassay".to_string())?;
    if simulator == "bioassay" {
        let demo_args = DemoArgs {
            sims: a.sims,
            grid: a.grid,
            k: a.k,
            transform: None,
        };
        let pv = r.optional("pvalues", a.pvalues.map(|p| p.display().to_string()))?;
        return run_demo(r, demo_args, seed, out, pv, a.gamma, t);
    }
    let stats: String = r.require("stats", a.stats)?;
    let baseline_path: String = r.require("baseline-sample", a.baseline_sample.map(|p| p.display().to_string()))?;
    let baseline: Vec<f64> = list(&r.require::<String>("baseline", None)?)?;
    let lo: Vec<f64> = list(&r.require::<String>("grid-lo", None)?)?;
    let hi: Vec<f64> = list(&r.require::<String>("grid-hi", None)?)?;
    let per_axis = r.get("grid", a.grid, 20usize)?;
    let gamma = r.get("gamma", a.gamma, 0.05)?;
    let k = r.get("k", a.k, 1000usize)?;
    let model_settings = scan_model_settings(r, seed)?;
    let pv: Option<String> = r.optional("pvalues", a.pvalues.map(|p| p.display().to_string()))?;
    let out = require_out(out)?;
    print_config(r);

    let corpus_data = ingest_csv(&simulator, &stats)?;
    let (_, base_sample) = read_matrix_csv(&baseline_path)?;
    if lo.len() != corpus_data.x.ncols() || hi.len() != lo.len() || baseline.len() != lo.len() {
        bail!(
            "grid-lo, grid-hi and baseline need {} entries each",
            corpus_data.x.ncols()
        );
    }
    let corpus = Corpus {
        lambdas: corpus_data.x.clone(),
        stats: corpus_data.y.clone(),
    };
    t.lap("ingest");
    let model = fit_scan_model(&corpus, &model_settings)?;
    t.lap("fit");
    let adj = Adjuster::new(&model.state, &model.hyper, &model.basis, &corpus.lambdas, &corpus.stats)?
        .with_source_cdfs()?;
    let cfg = ScanConfig {
        grid: regular_grid(&lo, &hi, &vec![per_axis; lo.len()]),
        baseline: DVector::from_vec(baseline),
        gamma,
        k_neighbors: k,
        baseline_count: base_sample.nrows(),
        baseline_mode: Default::default(),
        seed,
    };
    let res = scan_with_samples(&base_sample, None, &cfg, &adj)?;
    t.lap("scan");
    write_scan(&out, pv.as_deref().map(Path::new), &res, &corpus_data.covariate_names)?;
    println!("p_gamma = {:.6}; wrote {} grid points to {}", res.p_gamma, res.points.len(), out.display());
    Ok(())
}

fn demo(r: &mut Resolver, a: DemoArgs, seed: u64, out: Option<String>, t: &mut Timer) -> Result<()> {
    run_demo(r, a, seed, out, None, None, t)
}

fn run_demo(
    r: &mut Resolver,
    a: DemoArgs,
    seed: u64,
    out: Option<String>,
    pvalues: Option<String>,
    gamma: Option<f64>,
    t: &mut Timer,
) -> Result<()> {
    let d = BioassayScanSettings::default();
    let per_axis = r.get("grid", a.grid, d.grid_counts[0])?;
    let transform = match r.get("transform", a.transform, "as-printed".to_string())?.as_str() {
        "as-printed" => StatTransform::AsPrinted,
        "conventional" => StatTransform::Conventional,
        other => bail!("unknown transform '{other}' (as-printed | conventional)"),
    };
    let settings = BioassayScanSettings {
        simulations: r.get("sims", a.sims, d.simulations)?,
        grid_counts: [per_axis, per_axis],
        k_neighbors: r.get("k", a.k, d.k_neighbors)?,
        baseline_count: r.get("baseline-count", None, d.baseline_count)?,
        gamma: r.get("gamma", gamma, d.gamma)?,
        transform,
        model: scan_model_settings(r, seed)?,
        seed,
    };
    print_config(r);
    let scan = run_bioassay_scan(&settings)?;
    for (phase, dur) in &scan.timings {
        t.0.push((phase, dur.as_secs_f64()));
    }
    let check = scan.check_point();
    println!(
        "zeta_{} at sigma = ({}, {}) relative to base (10, 2.5): {:.4}",
        settings.gamma, check.lambda[0], check.lambda[1], check.zeta
    );
    println!("p_gamma = {:.6}", scan.result.p_gamma);
    if let Some(out) = out {
        let names = ["sigma0".to_string(), "sigma1".to_string()];
        write_scan(Path::new(&out), pvalues.as_deref().map(Path::new), &scan.result, &names)?;
        println!("wrote {} grid points to {}", scan.result.points.len(), out);
    }
    Ok(())
}
