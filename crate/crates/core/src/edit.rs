//! One editing request end to end: sample `n` series under a constraint set
//! and report how well the anchors and segment statistics were met.
//!
//! The command line and the HTTP service both go through [`run_edit`], so a
//! response can be reproduced byte for byte from either side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::guidance::{sample_guided, GuidanceConfig, StepTrace};
use crate::metrics::{achieved_stat, mad};
use crate::{Result, Series};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub constraints: ConstraintSet,
    pub seed: u64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub t: usize,
    pub c: usize,
    pub target: f64,
    /// Mean `|x[t, c] - target|` over the generated series.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub target: f64,
    /// Achieved statistic per generated series.
    pub achieved: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub seed: u64,
    /// Seed of each series: `seed + i`.
    pub seeds: Vec<u64>,
    pub series: Vec<Series>,
    /// MAD over all point anchors, when there are any.
    pub mad: Option<f64>,
    pub anchors: Vec<AnchorReport>,
    pub achieved_stats: Vec<SegmentReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Vec<StepTrace>>>,
}

impl EditResponse {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Seed of the `i`-th series of a request.
pub fn series_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

pub fn run_edit(
    model: &Denoiser,
    sched: &NoiseSchedule,
    request: &EditRequest,
    guidance: &GuidanceConfig,
) -> Result<EditResponse> {
    let cfg = model.config();
    request.constraints.validate(cfg.len, cfg.channels)?;
    let seeds: Vec<u64> = (0..request.n).map(|i| series_seed(request.seed, i)).collect();
    let results = seeds
        .par_iter()
        .map(|&s| sample_guided(model, sched, &request.constraints, guidance, s))
        .collect::<Result<Vec<_>>>()?;
    let trace = guidance
        .trace
        .then(|| results.iter().map(|r| r.trace.clone().unwrap_or_default()).collect());
    let series: Vec<Series> = results.into_iter().map(|r| r.series).collect();
    let summary = summarize(&series, &request.constraints)?;
    Ok(EditResponse {
        seed: request.seed,
        seeds,
        series,
        mad: summary.mad,
        anchors: summary.anchors,
        achieved_stats: summary.achieved_stats,
        trace,
    })
}

/// How well a batch of series meets the point and segment constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mad: Option<f64>,
    pub anchors: Vec<AnchorReport>,
    pub achieved_stats: Vec<SegmentReport>,
}

pub fn summarize(series: &[Series], constraints: &ConstraintSet) -> Result<Summary> {
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        if series.is_empty() {
            0.0
        } else {
            xs.sum::<f64>() / series.len() as f64
        }
    };
    let points = &constraints.points;
    let mad = if points.is_empty() || series.is_empty() {
        None
    } else {
        Some(mad(series, points)?)
    };
    let anchors = points
        .iter()
        .map(|p| AnchorReport {
            t: p.t,
            c: p.c,
            target: p.v,
            residual: mean(&mut series.iter().map(|s| (s.get(p.t, p.c) - p.v).abs())),
        })
        .collect();
    let achieved_stats = constraints
        .segments
        .iter()
        .map(|seg| {
            let achieved: Vec<f64> = series.iter().map(|s| achieved_stat(s, seg)).collect();
            SegmentReport {
                target: seg.target,
                mean: mean(&mut achieved.iter().copied()),
                achieved,
            }
        })
        .collect();
    Ok(Summary {
        mad,
        anchors,
        achieved_stats,
    })
}
