//! CSV import of feature banks and CSV score files.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lssvm::ScoreMatrix;
use crate::spectral::FeatureBank;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: e.to_string(),
    }
}

/// Reads all records, dropping a leading header row if its fields are not all numeric.
fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(values) => {
                if let Some(j) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        offset,
                        message: format!("non-finite value in row {i}, column {j}"),
                    });
                }
                rows.push(values);
            }
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    message: format!("row {i}: {e}"),
                })
            }
        }
    }
    Ok(rows)
}

/// A D×N bank from CSV: one line per feature row, one column per sample.
/// Values written with single precision parse to the same f64 as their text.
pub fn read_bank_csv(path: &Path, name: &str) -> Result<FeatureBank> {
    let rows = read_numeric_rows(path)?;
    let d = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    FeatureBank::from_row_major(name, d, n, &flat).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

pub fn write_bank_csv(path: &Path, bank: &FeatureBank) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in 0..bank.d() {
        writer
            .write_record(bank.data().row(r).iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Scores as CSV with header `class_0,...,class_{K-1}`, one line per sample.
pub fn write_scores_csv(path: &Path, scores: &ScoreMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record((0..scores.k()).map(|c| format!("class_{c}")))
        .map_err(|e| csv_error(path, e))?;
    for i in 0..scores.n() {
        writer
            .write_record(scores.data().row(i).iter().map(|v| v.to_string()))
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<ScoreMatrix> {
    let rows = read_numeric_rows(path)?;
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n == 0 || k == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "score file has no data rows".into(),
        });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    ScoreMatrix::new(DMatrix::from_row_slice(n, k, &flat))
}
