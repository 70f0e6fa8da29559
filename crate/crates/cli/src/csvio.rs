//! CSV reading and writing. Every file has a header row and a 1-based `t` column.

use std::path::Path;

use nalgebra::DVector;

use crate::error::CliError;

/// Full precision: 17 significant digits round-trip every `f64`.
pub fn fmt(value: f64) -> String {
    format!("{value:.16e}")
}

fn io_err(path: &Path, err: impl Into<std::io::Error>) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: err.into(),
    }
}

fn csv_err(path: &Path, err: csv::Error) -> CliError {
    match err.into_kind() {
        csv::ErrorKind::Io(e) => io_err(path, e),
        other => CliError::Ingestion {
            file: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn header(prefix: &str, count: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=count).map(|i| format!("{prefix}_{i}")))
        .collect()
}

/// Writes rows `t = 1..` of `header.len() - 1` numbers each.
pub fn write_series(path: &Path, header: &[String], rows: &[DVector<f64>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer.write_record(header).map_err(|e| csv_err(path, e))?;
    for (k, row) in rows.iter().enumerate() {
        let record = std::iter::once((k + 1).to_string()).chain(row.iter().map(|&v| fmt(v)));
        writer.write_record(record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// Writes arbitrary string records under `header`.
pub fn write_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))
}

/// Reads a `t, y_1..y_m` measurement file. Row numbers in errors count data
/// rows from 1 (the header is row 0).
pub fn read_measurements(path: &Path, m: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let ingest = |row: usize, message: String| CliError::Ingestion {
        file: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let expected = header("y", m);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(ingest(
            0,
            format!("header {found:?} does not match the {m} measurement channels {expected:?}"),
        ));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| ingest(row, e.to_string()))?;
        if record.len() != m + 1 {
            return Err(ingest(
                row,
                format!("expected {} fields, found {}", m + 1, record.len()),
            ));
        }
        match record[0].parse::<usize>() {
            Ok(t) if t == row => {}
            _ => return Err(ingest(row, format!("t must be {row}, found `{}`", &record[0]))),
        }
        let values = (1..=m)
            .map(|j| match record[j].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(ingest(row, format!("y_{j} is not a finite number: `{}`", &record[j]))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(DVector::from_vec(values));
    }
    if out.is_empty() {
        return Err(ingest(1, "no measurement rows".into()));
    }
    Ok(out)
}
