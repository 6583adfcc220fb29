use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::Error;

/// An `L × D` matrix of values: `len` timesteps by `channels` channels,
/// stored row-major (one row per timestep).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Series::filled(len, channels, 0.0)
    }

    pub fn filled(len: usize, channels: usize, value: f64) -> Self {
        Series {
            len,
            channels,
            data: vec![value; len * channels],
        }
    }

    pub fn from_vec(len: usize, channels: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != len * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {len}×{channels} series",
                data.len()
            )));
        }
        Ok(Series {
            len,
            channels,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, Error> {
        let channels = rows.first().map_or(0, Vec::len);
        if let Some((t, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != channels) {
            return Err(Error::Shape(format!(
                "row {t} has {} values, expected {channels}",
                row.len()
            )));
        }
        Ok(Series {
            len: rows.len(),
            channels,
            data: rows.concat(),
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel count `D`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.len, self.channels)
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    pub fn set(&mut self, t: usize, c: usize, value: f64) {
        self.data[t * self.channels + c] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.channels.max(1)).take(self.len)
    }

    /// Values of one channel in time order.
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |t| self.get(t, c))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_shape(&self, len: usize, channels: usize, what: &str) -> Result<(), Error> {
        if self.shape() != (len, channels) {
            return Err(Error::Shape(format!(
                "{what} has shape {}×{}, expected {len}×{channels}",
                self.len, self.channels
            )));
        }
        Ok(())
    }

    pub(crate) fn zip_map(&self, other: &Series, f: impl Fn(f64, f64) -> f64) -> Series {
        debug_assert_eq!(self.shape(), other.shape());
        Series {
            len: self.len,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Series {
        Series {
            len: self.len,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Serialized as a list of rows, one per timestep.
impl Serialize for Series {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.rows())
    }
}

impl<'de> Deserialize<'de> for Series {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Series::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}
