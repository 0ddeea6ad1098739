use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn mdpreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdpreg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two responses with a smooth dependence on two covariates.
fn write_data(dir: &Path) {
    let mut s = String::from("a,b,y1,y2\n");
    for i in 0..120 {
        let a = -2.0 + 4.0 * (i as f64 * 0.618_033_988_75).fract();
        let b = -2.0 + 4.0 * (i as f64 * 0.414_213_562_37).fract();
        let e = ((i * 37 % 17) as f64 - 8.0) * 0.01;
        s.push_str(&format!("{a},{b},{},{}\n", a * a + e, b - a - e));
    }
    fs::write(dir.join("train.csv"), s).unwrap();
}

fn fit_online(dir: &Path, out: &str, seed: &str) -> Output {
    mdpreg(
        dir,
        &[
            "fit-online", "--train", "train.csv", "--responses", "y1,y2", "--basis", "12", "--trunc", "3",
            "--warm", "40", "--seed", seed, "--out", out,
        ],
    )
}

#[test]
fn fit_online_writes_state() {
    let tmp = TempDir::new().unwrap();
    write_data(tmp.path());
    let o = fit_online(tmp.path(), "model.json", "5");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("model.json").exists());
    let err = stderr(&o);
    assert!(err.contains("trunc = 3"));
    assert!(err.contains("timing"));
}

#[test]
fn pipeline_produces_finite_predictions_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_data(d);
    assert!(fit_online(d, "model.json", "5").status.success());
    let o = mdpreg(
        d,
        &[
            "predict", "--model", "model.json", "--data", "train.csv", "--drop", "y1,y2", "--quantiles", "0.25,0.75",
            "--out", "pred.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("pred.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "mean_0,mean_1,q0.25_0,q0.25_1,q0.75_0,q0.75_1");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 120);
    for r in &rows {
        assert!(r.iter().all(|v| v.is_finite()));
        assert!(r[2] <= r[4] && r[3] <= r[5]);
    }

    let o = mdpreg(
        d,
        &[
            "adjust", "--model", "model.json", "--train", "train.csv", "--test", "train.csv", "--responses", "y1,y2",
            "--k", "20", "--out", "adj.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("adj.csv")).unwrap().starts_with("y1,y2\n"));

    let o = mdpreg(d, &["evaluate", "--pred", "adj.csv", "--truth", "train.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("RMSE") && table.contains("mean"));
}

#[test]
fn config_file_supplies_settings_and_flags_override() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_data(d);
    fs::write(
        d.join("fit.conf"),
        "# batch settings\ntrain = train.csv\nresponses = y1,y2\nbasis = 10\ntrunc = 5\niters = 20\nunknown_key = 1\n",
    )
    .unwrap();
    let o = mdpreg(d, &["fit-batch", "--config", "fit.conf", "--trunc", "2", "--out", "b.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("trunc = 2"));
    assert!(err.contains("basis = 10"));
    assert!(err.contains("unused config keys: unknown-key"));
}

#[test]
fn missing_file_exits_one_and_names_path() {
    let tmp = TempDir::new().unwrap();
    let o = mdpreg(
        tmp.path(),
        &["fit-batch", "--train", "absent.csv", "--responses", "y", "--out", "m.json"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.csv"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(mdpreg(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mdpreg(tmp.path(), &["fit-batch", "--basis", "many"]).status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write_data(d);
    for (model, pred) in [("m1.json", "p1.csv"), ("m2.json", "p2.csv")] {
        assert!(fit_online(d, model, "11").status.success());
        let o = mdpreg(d, &["predict", "--model", model, "--data", "train.csv", "--drop", "y1,y2", "--out", pred]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.join("m1.json")).unwrap(), fs::read(d.join("m2.json")).unwrap());
    assert_eq!(fs::read(d.join("p1.csv")).unwrap(), fs::read(d.join("p2.csv")).unwrap());
}

#[test]
fn prior_scan_from_csv_corpus() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    // Statistic is the hyperparameter plus a fixed jitter.
    let mut corpus = String::from("lambda,stat\n");
    for i in 0..400 {
        let l = 0.5 + 2.5 * (i as f64 * 0.618_033_988_75).fract();
        let jitter = ((i * 53 % 101) as f64 / 101.0 - 0.5) * l;
        corpus.push_str(&format!("{l},{}\n", l + jitter));
    }
    fs::write(d.join("corpus.csv"), corpus).unwrap();
    let mut base = String::from("stat\n");
    for i in 0..60 {
        base.push_str(&format!("{}\n", 1.0 + ((i * 29 % 61) as f64 / 61.0 - 0.5)));
    }
    fs::write(d.join("base.csv"), base).unwrap();
    fs::write(
        d.join("scan.conf"),
        "baseline = 1\ngrid_lo = 0.5\ngrid_hi = 3\nbasis = 10\nwarm = 100\nalpha = 5\n",
    )
    .unwrap();
    let o = mdpreg(
        d,
        &[
            "prior-scan", "--config", "scan.conf", "--simulator", "corpus.csv", "--stats", "stat", "--baseline-sample",
            "base.csv", "--grid", "4", "--k", "30", "--out", "zeta.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("zeta.csv")).unwrap();
    assert!(text.starts_with("lambda,zeta\n"));
    let zetas: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(zetas.len(), 4);
    assert!(zetas.iter().all(|z| (0.0..=1.0).contains(z)));
}
