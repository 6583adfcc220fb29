//! Synthetic sines, CSV ingestion and per-channel min-max scaling.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Series};

/// Per-channel `(min, max)` used to scale raw values into `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub ranges: Vec<(f64, f64)>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            ranges: vec![(0.0, 1.0); channels],
        }
    }

    fn check(&self, series: &Series) -> Result<()> {
        if self.ranges.len() != series.channels() {
            return Err(Error::Shape(format!(
                "normalization covers {} channels, series has {}",
                self.ranges.len(),
                series.channels()
            )));
        }
        Ok(())
    }

    /// Raw values to `[0, 1]`. Constant channels map to 0.5.
    pub fn normalize(&self, series: &Series) -> Result<Series> {
        self.check(series)?;
        let mut out = series.clone();
        let channels = series.channels();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let (lo, hi) = self.ranges[i % channels];
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
        Ok(out)
    }
}

/// Maps normalized values back to the original units.
pub fn denormalize(series: &Series, norm: &Normalization) -> Result<Series> {
    norm.check(series)?;
    let mut out = series.clone();
    let channels = series.channels();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let (lo, hi) = norm.ranges[i % channels];
        *v = if hi > lo { lo + *v * (hi - lo) } else { lo };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: Vec<Series>,
    pub len: usize,
    pub channels: usize,
    pub norm: Normalization,
}

/// `n` series of `len × channels` sine waves `a·sin(2π f j / len + φ) + 0.5`
/// with `f ∈ [1, 4]`, `a ∈ [0.2, 0.5]` and `φ ∈ [0, 2π)` drawn per channel.
pub fn gen_sines(n: usize, len: usize, channels: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..n)
        .map(|_| {
            let waves: Vec<(f64, f64, f64)> = (0..channels)
                .map(|_| {
                    (
                        rng.random_range(1.0..=4.0),
                        rng.random_range(0.2..=0.5),
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect();
            let mut s = Series::zeros(len, channels);
            for j in 0..len {
                for (c, &(f, a, phase)) in waves.iter().enumerate() {
                    s.set(j, c, a * (TAU * f * j as f64 / len as f64 + phase).sin() + 0.5);
                }
            }
            s
        })
        .collect();
    Dataset {
        series,
        len,
        channels,
        norm: Normalization::identity(channels),
    }
}

fn parse_row(record: &csv::StringRecord) -> Option<Vec<f64>> {
    record.iter().map(|f| f.trim().parse::<f64>().ok()).collect()
}

/// Reads a CSV of one timestep per row and one channel per column, cuts it
/// into non-overlapping windows of `len` rows and min-max scales each
/// channel. A first row that does not parse as numbers is taken as a header.
pub fn load_csv(path: impl AsRef<Path>, len: usize, channels: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if record.len() != channels {
            return Err(Error::Data(format!(
                "{}: line {} has {} columns, expected {channels}",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        match parse_row(&record) {
            Some(r) => rows.push(r),
            None if line == 0 => continue,
            None => {
                return Err(Error::Data(format!(
                    "{}: line {} has a non-numeric cell",
                    path.display(),
                    line + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    if len == 0 || !rows.len().is_multiple_of(len) {
        return Err(Error::Data(format!(
            "{}: {} rows is not a multiple of the window length {len}",
            path.display(),
            rows.len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite value", path.display())));
    }
    let ranges = (0..channels)
        .map(|c| {
            rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[c]), hi.max(r[c]))
            })
        })
        .collect();
    let norm = Normalization { ranges };
    let series = rows
        .chunks(len)
        .map(|w| norm.normalize(&Series::from_rows(w)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        series,
        len,
        channels,
        norm,
    })
}
