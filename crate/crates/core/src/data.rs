//! CSV ingestion and output, accuracy metrics and in-sample fitted values.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::VariationalState;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub response_names: Vec<String>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    /// Subset of rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            covariate_names: self.covariate_names.clone(),
            response_names: self.response_names.clone(),
        }
    }
}

/// Resolve a comma-separated list of column names or zero-based indices.
/// A token matching a header name is a name even if it looks numeric.
fn resolve_columns(header: &[String], spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let idx = match header.iter().position(|h| h == tok) {
            Some(i) => i,
            None => match tok.parse::<usize>() {
                Ok(i) if i < header.len() => i,
                _ => return Err(Error::UnknownColumn(tok.to_string())),
            },
        };
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidParams("no response columns given".into()));
    }
    Ok(out)
}

/// Numeric table with a header row.
pub fn read_table<R: Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(Error::RaggedRow {
                line,
                expected: width,
                found: rec.len(),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                line,
                column: header[c].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    line,
                    column: header[c].clone(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok((header, DMatrix::from_row_slice(rows, width, &values)))
}

/// Split a numeric table into covariates and responses.
pub fn split_table(header: &[String], table: &DMatrix<f64>, responses: &str) -> Result<Dataset> {
    let ycols = resolve_columns(header, responses)?;
    let xcols: Vec<usize> = (0..header.len()).filter(|c| !ycols.contains(c)).collect();
    if table.nrows() == 0 {
        return Err(Error::DegenerateSample("no data rows".into()));
    }
    Ok(Dataset {
        x: table.select_columns(&xcols),
        y: table.select_columns(&ycols),
        covariate_names: xcols.iter().map(|&c| header[c].clone()).collect(),
        response_names: ycols.iter().map(|&c| header[c].clone()).collect(),
    })
}

pub fn parse_csv<R: Read>(reader: R, responses: &str) -> Result<Dataset> {
    let (header, table) = read_table(reader)?;
    split_table(&header, &table, responses)
}

pub fn ingest_csv(path: impl AsRef<Path>, responses: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(f), responses)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(std::io::BufReader::new(f))
}

/// Write a matrix with a header row. Values use the shortest exact
/// representation, so output is byte-stable for identical inputs.
pub fn write_matrix_csv(path: impl AsRef<Path>, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rmse: Vec<f64>,
    pub mape: Vec<f64>,
    /// Rows skipped per dimension for MAPE because the truth was zero.
    pub mape_skipped: Vec<usize>,
    pub mean_rmse: f64,
    pub mean_mape: f64,
}

pub fn metrics(truth: &DMatrix<f64>, fitted: &DMatrix<f64>) -> Result<Metrics> {
    if truth.shape() != fitted.shape() {
        return Err(Error::DimensionMismatch(format!(
            "truth is {:?}, fitted is {:?}",
            truth.shape(),
            fitted.shape()
        )));
    }
    let (n, m) = truth.shape();
    if n == 0 {
        return Err(Error::DegenerateSample("no rows to score".into()));
    }
    let mut rmse = Vec::with_capacity(m);
    let mut mape = Vec::with_capacity(m);
    let mut mape_skipped = Vec::with_capacity(m);
    for l in 0..m {
        let sq: f64 = (0..n).map(|i| (truth[(i, l)] - fitted[(i, l)]).powi(2)).sum();
        rmse.push((sq / n as f64).sqrt());
        let mut total = 0.0;
        let mut used = 0;
        for i in 0..n {
            let t = truth[(i, l)];
            if t != 0.0 {
                total += ((t - fitted[(i, l)]) / t).abs();
                used += 1;
            }
        }
        mape.push(if used > 0 { total / used as f64 } else { f64::NAN });
        mape_skipped.push(n - used);
    }
    Ok(Metrics {
        mean_rmse: rmse.iter().sum::<f64>() / m as f64,
        mean_mape: mape.iter().sum::<f64>() / m as f64,
        rmse,
        mape,
        mape_skipped,
    })
}

/// `ŷ_i = (Σ_j q_ij β̂_j)ᵀ E_i`.
pub fn insample_fit(
    state: &VariationalState,
    alloc: Option<&DMatrix<f64>>,
    designs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let q = alloc.ok_or_else(|| Error::MissingAllocations("model was saved without allocations".into()))?;
    let n = designs.nrows();
    if q.nrows() != n || q.ncols() != state.trunc() {
        return Err(Error::MissingAllocations(format!(
            "allocation table is {}x{}, need {n}x{}",
            q.nrows(),
            q.ncols(),
            state.trunc()
        )));
    }
    if designs.ncols() != state.design_dim() {
        return Err(Error::DimensionMismatch(format!(
            "designs have {} columns, state expects {}",
            designs.ncols(),
            state.design_dim()
        )));
    }
    let m = state.response_dim();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let e = designs.row(i).transpose();
        for (j, c) in state.components.iter().enumerate() {
            let w = q[(i, j)];
            if w != 0.0 {
                let pred = c.beta_hat.tr_mul(&e) * w;
                for l in 0..m {
                    out[(i, l)] += pred[l];
                }
            }
        }
    }
    Ok(out)
}
