//! Synthetic datasets and CSV storage.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::HarnessError;
use crate::network::LabeledDataset;
use crate::numkernels::{numerical_rank, DenseMatrix};

/// Re-draws allowed before an independent draw is given up.
pub const REDRAW_BUDGET: usize = 100;

/// `n` Gaussian rows in dimension `d`, optionally projected to the sphere, with
/// alternating `+1, -1` labels. `independent` re-draws until the rows have rank `n`.
pub fn gen_synthetic(n: usize, d: usize, seed: u64, unit_norm: bool, independent: bool) -> Result<LabeledDataset, HarnessError> {
    if n == 0 || d == 0 {
        return Err(HarnessError::config("n", "n and d must be >= 1"));
    }
    if independent && n > d {
        return Err(HarnessError::config("n", format!("{n} independent samples need d >= n, got d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<i64> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    for _ in 0..REDRAW_BUDGET {
        let mut x = DenseMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        if unit_norm {
            for mut row in x.row_iter_mut() {
                let norm = row.norm();
                if norm == 0.0 {
                    continue;
                }
                row /= norm;
            }
        }
        if x.row_iter().any(|r| r.norm() == 0.0) {
            continue;
        }
        if independent && numerical_rank(&x, 1e-10) < n {
            continue;
        }
        return Ok(LabeledDataset::new(x, labels, unit_norm)?);
    }
    Err(HarnessError::GenerationFailed { attempts: REDRAW_BUDGET })
}

/// Fixed-width scientific notation with 17 significant digits; parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `x0..x{d-1},label`, one sample per row.
pub fn write_dataset_csv(path: &Path, ds: &LabeledDataset) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io_err(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.samples.row(i).iter().map(|&v| fmt_f64(v)).collect();
        rec.push(ds.labels[i].to_string());
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a file written by [`write_dataset_csv`]. The unit-norm flag is set when
/// every row has norm 1 to within the dataset tolerance.
pub fn read_dataset_csv(path: &Path) -> Result<LabeledDataset, HarnessError> {
    let (header, rows) = read_rows(path)?;
    if header.last().map(String::as_str) != Some("label") || header.len() < 2 {
        return Err(HarnessError::Parse {
            path: path.display().to_string(),
            message: "expected header x0,..,label".into(),
        });
    }
    let d = header.len() - 1;
    let mut flat = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (line, row) in rows.iter().enumerate() {
        for field in &row[..d] {
            flat.push(parse_f64(path, line + 2, field)?);
        }
        labels.push(row[d].trim().parse::<i64>().map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            message: format!("line {}: {e}", line + 2),
        })?);
    }
    let x = DenseMatrix::from_row_slice(rows.len(), d, &flat);
    let unit = x.row_iter().all(|r| (r.norm() - 1.0).abs() <= 1e-9);
    Ok(LabeledDataset::new(x, labels, unit)?)
}

/// Writes a plain matrix with the given column names.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DenseMatrix) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|&v| fmt_f64(v))).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a numeric CSV with a header row; returns the header and the matrix.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DenseMatrix), HarnessError> {
    let (header, rows) = read_rows(path)?;
    let mut flat = Vec::with_capacity(rows.len() * header.len());
    for (line, row) in rows.iter().enumerate() {
        for field in row {
            flat.push(parse_f64(path, line + 2, field)?);
        }
    }
    Ok((header.clone(), DenseMatrix::from_row_slice(rows.len(), header.len(), &flat)))
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    if rows.is_empty() {
        return Err(HarnessError::Parse {
            path: path.display().to_string(),
            message: "no data rows".into(),
        });
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, HarnessError> {
    field.trim().parse::<f64>().map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        message: format!("line {line}: {e}"),
    })
}
