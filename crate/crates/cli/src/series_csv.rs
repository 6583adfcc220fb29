//! Series files: header `t,c0,…,c{D-1}` and one row per time step.
//!
//! Values are written in Rust's shortest round-trip float form, so reading a
//! file back yields the exact same numbers.

use std::path::Path;

use tsedit::Series;

use crate::CliError;

pub fn to_string(series: &Series) -> String {
    let mut out = String::from("t");
    for c in 0..series.channels() {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for (t, row) in series.rows().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write(path: &Path, series: &Series) -> Result<(), CliError> {
    std::fs::write(path, to_string(series)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Series, CliError> {
    let bad = |detail: String| CliError::Input(format!("{}: {detail}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let channels = header.len().saturating_sub(1);
    let expected = std::iter::once("t".to_string()).chain((0..channels).map(|c| format!("c{c}")));
    if channels == 0 || !header.iter().eq(expected) {
        return Err(bad(format!("expected header `t,c0,…`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let t: usize = record[0].trim().parse().map_err(|_| bad(format!("row {i}: bad time index `{}`", &record[0])))?;
        if t != i {
            return Err(bad(format!("row {i} has time index {t}")));
        }
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("row {i}: `{f}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(bad("no rows".into()));
    }
    Ok(Series::from_rows(&rows)?)
}
