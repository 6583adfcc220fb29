//! Constraint vocabulary and its compilation into an observed canvas and a
//! float mask.
//!
//! Points populate the local mask, interpolated trends the segment mask, and
//! an optional whole-series reference the global mask. The three are merged
//! with the λ-weighted convex combination
//! `m = (λ₁ m_local + λ₂ m_segment + λ₃ m_global) / (λ₁ + λ₂ + λ₃)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Series};

/// A confidence-weighted anchor: value `v` at time `t` on channel `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointConstraint {
    pub t: usize,
    pub v: f64,
    pub c: usize,
    pub w: f64,
}

/// Piecewise-linear reference curve through `knots` on channel `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendConstraint {
    pub knots: Vec<(usize, f64)>,
    pub c: usize,
    pub w: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Sum,
    #[serde(rename = "avg")]
    Average,
}

/// Target aggregate over the inclusive range `s..=e` of channel `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConstraint {
    pub s: usize,
    pub e: usize,
    pub c: usize,
    pub stat: Statistic,
    pub target: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub w: f64,
}

fn one() -> f64 {
    1.0
}

impl SegmentConstraint {
    pub fn width(&self) -> usize {
        self.e + 1 - self.s
    }

    /// Value of the aggregate on `x`.
    pub fn aggregate(&self, x: &Series) -> f64 {
        let sum: f64 = (self.s..=self.e).map(|t| x.get(t, self.c)).sum();
        match self.stat {
            Statistic::Sum => sum,
            Statistic::Average => sum / self.width() as f64,
        }
    }
}

/// A whole-series reference with a uniform confidence; feeds the global mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalReference {
    pub series: Series,
    pub w: f64,
}

/// Everything a user can ask of a generated series. Mirrors the JSON schema
/// shared by the CLI, the service and the editor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default)]
    pub points: Vec<PointConstraint>,
    #[serde(default)]
    pub trends: Vec<TrendConstraint>,
    #[serde(default)]
    pub segments: Vec<SegmentConstraint>,
    /// Mask weights `(λ₁, λ₂, λ₃)` for local, segment and global masks.
    /// When absent, each granularity that carries constraints gets weight 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<GlobalReference>,
}

impl ConstraintSet {
    /// Parses the JSON schema, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Constraint(format!("at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
            && self.trends.is_empty()
            && self.segments.is_empty()
            && self.global.is_none()
    }

    /// Checks every constraint against an `len × channels` series.
    pub fn validate(&self, len: usize, channels: usize) -> Result<()> {
        let range = |location: String, detail: String| Err(Error::OutOfRange { location, detail });
        let confidence = |location: String, w: f64| {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::OutOfRange {
                    location,
                    detail: format!("confidence {w} outside [0, 1]"),
                });
            }
            Ok(())
        };
        for (i, p) in self.points.iter().enumerate() {
            let loc = format!("points[{i}]");
            if p.t >= len {
                return range(loc, format!("time index {} ≥ length {len}", p.t));
            }
            if p.c >= channels {
                return range(loc, format!("channel {} ≥ channel count {channels}", p.c));
            }
            if !p.v.is_finite() {
                return range(loc, format!("value {} is not finite", p.v));
            }
            confidence(loc, p.w)?;
        }
        for (i, tr) in self.trends.iter().enumerate() {
            let loc = format!("trends[{i}]");
            if tr.c >= channels {
                return range(loc, format!("channel {} ≥ channel count {channels}", tr.c));
            }
            if let Some((t, _)) = tr.knots.iter().find(|(t, _)| *t >= len) {
                return range(loc, format!("knot time {t} ≥ length {len}"));
            }
            if tr.knots.iter().any(|(_, v)| !v.is_finite()) {
                return range(loc, "knot value is not finite".into());
            }
            confidence(loc.clone(), tr.w)?;
            check_knots(&tr.knots).map_err(|detail| Error::OutOfRange { location: loc, detail })?;
        }
        for (j, seg) in self.segments.iter().enumerate() {
            let loc = format!("segments[{j}]");
            if seg.s > seg.e || seg.e >= len {
                return range(loc, format!("segment {}..={} invalid for length {len}", seg.s, seg.e));
            }
            if seg.c >= channels {
                return range(loc, format!("channel {} ≥ channel count {channels}", seg.c));
            }
            if !(seg.beta >= 0.0) || !seg.beta.is_finite() {
                return range(loc, format!("weight β = {} must be finite and ≥ 0", seg.beta));
            }
            if !seg.target.is_finite() {
                return range(loc, format!("target {} is not finite", seg.target));
            }
            confidence(loc, seg.w)?;
        }
        if let Some(g) = &self.global {
            if g.series.shape() != (len, channels) {
                return range(
                    "global".into(),
                    format!(
                        "reference is {}×{}, expected {len}×{channels}",
                        g.series.len(),
                        g.series.channels()
                    ),
                );
            }
            confidence("global".into(), g.w)?;
        }
        if let Some(l) = self.lambdas {
            if l.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || l.iter().sum::<f64>() <= 0.0 {
                return range(
                    "lambdas".into(),
                    format!("{l:?} must be nonnegative and not all zero"),
                );
            }
        }
        Ok(())
    }

    /// Mask weights in effect: the explicit `lambdas`, or 1 for every
    /// granularity that carries constraints.
    pub fn effective_lambdas(&self) -> [f64; 3] {
        self.lambdas.unwrap_or_else(|| {
            let active = |b: bool| if b { 1.0 } else { 0.0 };
            [
                active(!self.points.is_empty()),
                active(!self.trends.is_empty()),
                active(self.global.is_some()),
            ]
        })
    }

    /// Compiles the point-wise constraints into one canvas.
    pub fn compile(&self, len: usize, channels: usize) -> Result<ObservedCanvas> {
        self.validate(len, channels)?;
        let local = compile_points(&self.points, len, channels)?;
        let mut trend_points = Vec::new();
        for tr in &self.trends {
            trend_points.extend(interpolate_trend(tr)?);
        }
        let segment = compile_points(&trend_points, len, channels)
            .map_err(|e| Error::Constraint(format!("trends overlap: {e}")))?;
        let global = match &self.global {
            Some(g) => ObservedCanvas {
                values: g.series.clone(),
                mask: FloatMask(Series::filled(len, channels, g.w)),
            },
            None => ObservedCanvas::empty(len, channels),
        };
        let lambdas = self.effective_lambdas();
        if lambdas.iter().sum::<f64>() == 0.0 {
            return Ok(ObservedCanvas::empty(len, channels));
        }
        let mask = combine_masks(&MaskBundle {
            local: local.mask.clone(),
            segment: segment.mask.clone(),
            global: global.mask.clone(),
            lambdas,
        })?;
        // Where several granularities constrain a cell, the observed value is
        // their λ·m-weighted mean.
        let parts = [&local, &segment, &global];
        let mut values = Series::zeros(len, channels);
        for i in 0..len * channels {
            let (mut num, mut den) = (0.0, 0.0);
            for (lambda, part) in lambdas.iter().zip(parts) {
                let wgt = lambda * part.mask.0.as_slice()[i];
                num += wgt * part.values.as_slice()[i];
                den += wgt;
            }
            if den > 0.0 {
                values.as_mut_slice()[i] = num / den;
            }
        }
        Ok(ObservedCanvas { values, mask })
    }
}

fn check_knots(knots: &[(usize, f64)]) -> std::result::Result<(), String> {
    if knots.len() < 2 {
        return Err(format!("a trend needs at least 2 knots, got {}", knots.len()));
    }
    if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err("knot times must be strictly increasing".into());
    }
    Ok(())
}

/// An `L × D` matrix of confidences in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Series", into = "Series")]
pub struct FloatMask(Series);

impl FloatMask {
    pub fn new(values: Series) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Constraint(format!("mask entry {v} outside [0, 1]")));
        }
        Ok(FloatMask(values))
    }

    pub fn zeros(len: usize, channels: usize) -> Self {
        FloatMask(Series::zeros(len, channels))
    }

    pub fn as_series(&self) -> &Series {
        &self.0
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.0.get(t, c)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn is_zero(&self) -> bool {
        self.0.as_slice().iter().all(|&m| m == 0.0)
    }

    /// Sum of all entries.
    pub fn total(&self) -> f64 {
        self.0.as_slice().iter().sum()
    }
}

impl TryFrom<Series> for FloatMask {
    type Error = Error;
    fn try_from(s: Series) -> Result<Self> {
        FloatMask::new(s)
    }
}

impl From<FloatMask> for Series {
    fn from(m: FloatMask) -> Series {
        m.0
    }
}

/// Observed values `x_ob` with their confidences. Cells with zero mask are
/// unconstrained and hold zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedCanvas {
    pub values: Series,
    pub mask: FloatMask,
}

impl ObservedCanvas {
    pub fn empty(len: usize, channels: usize) -> Self {
        ObservedCanvas {
            values: Series::zeros(len, channels),
            mask: FloatMask::zeros(len, channels),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_zero()
    }

    /// Cells with nonzero mask, as point constraints.
    pub fn to_points(&self) -> Vec<PointConstraint> {
        let (len, channels) = self.shape();
        let mut out = Vec::new();
        for t in 0..len {
            for c in 0..channels {
                let w = self.mask.get(t, c);
                if w > 0.0 {
                    out.push(PointConstraint {
                        t,
                        v: self.values.get(t, c),
                        c,
                        w,
                    });
                }
            }
        }
        out
    }
}

/// Places each point's value and confidence on an empty canvas.
pub fn compile_points(points: &[PointConstraint], len: usize, channels: usize) -> Result<ObservedCanvas> {
    let mut canvas = ObservedCanvas::empty(len, channels);
    let mut seen = HashSet::new();
    for (i, p) in points.iter().enumerate() {
        if p.t >= len || p.c >= channels {
            return Err(Error::OutOfRange {
                location: format!("points[{i}]"),
                detail: format!("cell ({}, {}) outside {len}×{channels}", p.t, p.c),
            });
        }
        if !(0.0..=1.0).contains(&p.w) {
            return Err(Error::OutOfRange {
                location: format!("points[{i}]"),
                detail: format!("confidence {} outside [0, 1]", p.w),
            });
        }
        if !seen.insert((p.t, p.c)) {
            return Err(Error::Constraint(format!(
                "points[{i}] duplicates cell (t={}, c={})",
                p.t, p.c
            )));
        }
        canvas.values.set(p.t, p.c, p.v);
        canvas.mask.0.set(p.t, p.c, p.w);
    }
    Ok(canvas)
}

/// One point per integer time between the first and last knot, linearly
/// interpolated between consecutive knots.
pub fn interpolate_trend(trend: &TrendConstraint) -> Result<Vec<PointConstraint>> {
    check_knots(&trend.knots).map_err(Error::Constraint)?;
    let mut out = Vec::new();
    for (k, pair) in trend.knots.windows(2).enumerate() {
        let ((ts, ls), (te, le)) = (pair[0], pair[1]);
        // Each interval owns its start; the last interval also owns its end.
        let last = k + 2 == trend.knots.len();
        let end = if last { te } else { te - 1 };
        for t in ts..=end {
            let v = if t == te {
                le
            } else {
                ls + (t - ts) as f64 / (te - ts) as f64 * (le - ls)
            };
            out.push(PointConstraint {
                t,
                v,
                c: trend.c,
                w: trend.w,
            });
        }
    }
    Ok(out)
}

/// The three masks of different granularity and their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle {
    pub local: FloatMask,
    pub segment: FloatMask,
    pub global: FloatMask,
    pub lambdas: [f64; 3],
}

pub fn combine_masks(bundle: &MaskBundle) -> Result<FloatMask> {
    let l = bundle.lambdas;
    let total: f64 = l.iter().sum();
    if l.iter().any(|x| *x < 0.0) || !(total > 0.0) {
        return Err(Error::Constraint(format!(
            "mask weights {l:?} must be nonnegative with a positive sum"
        )));
    }
    let shape = bundle.local.shape();
    if bundle.segment.shape() != shape || bundle.global.shape() != shape {
        return Err(Error::Shape("masks differ in shape".into()));
    }
    let data = (0..shape.0 * shape.1)
        .map(|i| {
            let m = (l[0] * bundle.local.as_slice()[i]
                + l[1] * bundle.segment.as_slice()[i]
                + l[2] * bundle.global.as_slice()[i])
                / total;
            m.clamp(0.0, 1.0)
        })
        .collect();
    Ok(FloatMask(Series::from_vec(shape.0, shape.1, data)?))
}

/// `ω_t = exp(-γ · t / T)`.
pub fn time_weight(t: usize, steps: usize, gamma: f64) -> f64 {
    (-gamma * t as f64 / steps as f64).exp()
}

/// Raises the mask at constrained cells in proportion to the current
/// estimation error: `m ← clamp(m + ρ·min(1, |x̂₀ - x_ob|), m, 1)`.
/// Unconstrained cells stay at zero.
pub fn adjust_mask(mask: &FloatMask, x0_hat: &Series, canvas: &ObservedCanvas, rate: f64) -> FloatMask {
    let mut out = mask.0.clone();
    for (i, m) in out.as_mut_slice().iter_mut().enumerate() {
        if *m > 0.0 {
            let err = (x0_hat.as_slice()[i] - canvas.values.as_slice()[i]).abs();
            let bumped = *m + rate * err.min(1.0);
            // NaN errors leave the mask as it was
            *m = if bumped.is_nan() { *m } else { bumped.clamp(*m, 1.0) };
        }
    }
    FloatMask(out)
}
