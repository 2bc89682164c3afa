//! CSV input and output for sample matrices, chains and reports.

use std::path::Path;

use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes a header row and one record per row.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(header.iter().map(AsRef::as_ref))
        .map_err(|e| write_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix<T: Real, S: AsRef<str>>(path: &Path, header: &[S], m: &Tensor<T>) -> Result<()> {
    if header.len() != m.cols() {
        return Err(Error::Dimension {
            expected: m.cols(),
            got: header.len(),
        });
    }
    write_csv(
        path,
        header,
        (0..m.rows()).map(|r| m.row(r).iter().map(|v| format_float(v.to_f64_lossy())).collect()),
    )
}

/// Reads a numeric CSV with a header row. Ragged rows and unparsable fields
/// are reported with their 1-based line number.
pub fn read_matrix<T: Real>(path: &Path) -> Result<(Vec<String>, Tensor<T>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_from(file, path)
}

pub(crate) fn read_matrix_from<T: Real, R: std::io::Read>(src: R, path: &Path) -> Result<(Vec<String>, Tensor<T>)> {
    let csv_err = |line: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(csv_err(1, "missing header row".into()));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            csv_err(line, message)
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(line, format!("field {}: cannot parse {field:?} as a number", k + 1)))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("field {}: non-finite value", k + 1)));
            }
            data.push(T::c(v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(csv_err(2, "no data rows".into()));
    }
    let cols = header.len();
    Ok((header, Tensor::matrix(rows, cols, data)?))
}
