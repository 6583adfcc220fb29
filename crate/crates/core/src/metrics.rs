//! Control accuracy (MAD, achieved statistics), kernel density estimates and
//! seed sweeps over confidence or target grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, PointConstraint, SegmentConstraint, Statistic};
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::guidance::{sample_guided, sample_unconditional, GuidanceConfig};
use crate::{Error, Result, Series};

/// Mean absolute difference between generated values and anchor targets,
/// averaged over anchors and series.
pub fn mad(generated: &[Series], anchors: &[PointConstraint]) -> Result<f64> {
    if anchors.is_empty() {
        return Err(Error::Config("MAD needs at least one anchor".into()));
    }
    if generated.is_empty() {
        return Err(Error::Config("MAD needs at least one series".into()));
    }
    let (len, channels) = generated[0].shape();
    for s in generated {
        s.ensure_shape(len, channels, "generated series")?;
    }
    if let Some(a) = anchors.iter().find(|a| a.t >= len || a.c >= channels) {
        return Err(Error::OutOfRange {
            location: format!("anchor (t={}, c={})", a.t, a.c),
            detail: format!("outside {len}×{channels}"),
        });
    }
    let total: f64 = generated
        .iter()
        .flat_map(|s| anchors.iter().map(move |a| (s.get(a.t, a.c) - a.v).abs()))
        .sum();
    Ok(total / (generated.len() * anchors.len()) as f64)
}

/// Sum or average of the segment's cells.
pub fn achieved_stat(series: &Series, segment: &SegmentConstraint) -> f64 {
    segment.aggregate(series)
}

/// Silverman's rule-of-thumb bandwidth `1.06 σ̂ n^(-1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Data("KDE needs at least two values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Data("KDE input has zero spread".into()));
    }
    Ok(h)
}

/// Gaussian kernel density estimate evaluated on `grid`.
pub fn kde(values: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(values)?;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect())
}

/// Grid of a seed sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepSpec {
    /// Anchors at fractional positions of the series on one channel, all set
    /// to one value per row, swept over confidence columns. Cells hold MAD.
    Confidence {
        confidences: Vec<f64>,
        values: Vec<f64>,
        positions: Vec<f64>,
        channel: usize,
    },
    /// A sum constraint over `segment` (whole series when absent), swept over
    /// target columns and β rows. Cells hold the achieved statistic.
    SumTarget {
        targets: Vec<f64>,
        betas: Vec<f64>,
        channel: usize,
        #[serde(default)]
        segment: Option<(usize, usize)>,
        #[serde(default = "sum_stat")]
        stat: Statistic,
    },
}

fn sum_stat() -> Statistic {
    Statistic::Sum
}

impl SweepSpec {
    pub fn default_confidence() -> Self {
        SweepSpec::Confidence {
            confidences: vec![0.01, 0.5, 1.0],
            values: vec![0.1, 0.8, 1.0],
            positions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            channel: 0,
        }
    }

    pub fn default_sum() -> Self {
        SweepSpec::SumTarget {
            targets: vec![-100.0, 20.0, 50.0, 150.0],
            betas: vec![1.0, 10.0, 50.0, 100.0],
            channel: 0,
            segment: None,
            stat: Statistic::Sum,
        }
    }

    fn axes(&self) -> (&'static str, Vec<f64>, &'static str, Vec<f64>) {
        match self {
            SweepSpec::Confidence {
                confidences, values, ..
            } => ("value", values.clone(), "confidence", confidences.clone()),
            SweepSpec::SumTarget { targets, betas, .. } => ("beta", betas.clone(), "target", targets.clone()),
        }
    }

    /// Constraints for one grid cell.
    pub fn cell_constraints(&self, row: usize, col: usize, len: usize) -> ConstraintSet {
        match self {
            SweepSpec::Confidence {
                confidences,
                values,
                positions,
                channel,
            } => ConstraintSet {
                points: anchor_points(positions, len, values[row], *channel, confidences[col]),
                ..Default::default()
            },
            SweepSpec::SumTarget {
                targets,
                betas,
                channel,
                segment,
                stat,
            } => {
                let (s, e) = segment.unwrap_or((0, len - 1));
                ConstraintSet {
                    segments: vec![SegmentConstraint {
                        s,
                        e,
                        c: *channel,
                        stat: *stat,
                        target: targets[col],
                        beta: betas[row],
                        w: 1.0,
                    }],
                    ..Default::default()
                }
            }
        }
    }

    /// The cell metric for one generated series.
    fn measure(&self, series: &Series, cell: &ConstraintSet) -> Result<f64> {
        match self {
            SweepSpec::Confidence { .. } => mad(std::slice::from_ref(series), &cell.points),
            SweepSpec::SumTarget { .. } => Ok(achieved_stat(series, &cell.segments[0])),
        }
    }
}

/// Anchors at `round(p·len)` for each fractional position `p`.
pub fn anchor_points(positions: &[f64], len: usize, value: f64, channel: usize, w: f64) -> Vec<PointConstraint> {
    positions
        .iter()
        .map(|p| PointConstraint {
            t: ((p * len as f64).round() as usize).min(len - 1),
            v: value,
            c: channel,
            w,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub spec: SweepSpec,
    pub row_label: String,
    pub rows: Vec<f64>,
    pub column_label: String,
    pub columns: Vec<f64>,
    /// `mean[row][col]` over seeds.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// Unconditional metric per row, mean and std over seeds.
    pub baseline_mean: Vec<f64>,
    pub baseline_std: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `values[row][col][seed]`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `baseline_values[row][seed]`.
    pub baseline_values: Vec<Vec<f64>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepReport {
    /// Grid of means, one row per row value.
    pub fn to_csv(&self) -> String {
        let mut out = self.row_label.clone();
        for c in &self.columns {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.mean) {
            out.push_str(&r.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every grid cell for every seed, plus the unconditional baseline.
///
/// Work is spread over `jobs` threads. Results are stored by index, so the
/// report does not depend on `jobs`.
pub fn run_sweep(
    model: &Denoiser,
    sched: &NoiseSchedule,
    spec: &SweepSpec,
    guidance: &GuidanceConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<SweepReport> {
    let (row_label, rows, column_label, columns) = spec.axes();
    if rows.is_empty() || columns.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid and seed list must be non-empty".into()));
    }
    let len = model.config().len;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let (nr, nc, ns) = (rows.len(), columns.len(), seeds.len());
    let (unconditional, cells) = pool.install(|| -> Result<(Vec<Series>, Vec<f64>)> {
        let unconditional = seeds
            .par_iter()
            .map(|&seed| sample_unconditional(model, sched, guidance.clamp, seed))
            .collect::<Result<Vec<_>>>()?;
        let cells = (0..nr * nc * ns)
            .into_par_iter()
            .map(|i| {
                let (r, c, s) = (i / (nc * ns), (i / ns) % nc, i % ns);
                let set = spec.cell_constraints(r, c, len);
                let out = sample_guided(model, sched, &set, guidance, seeds[s]).map_err(|e| {
                    Error::Numeric(format!(
                        "cell ({row_label}={}, {column_label}={}, seed {}): {e}",
                        rows[r], columns[c], seeds[s]
                    ))
                })?;
                spec.measure(&out.series, &set)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((unconditional, cells))
    })?;

    let mut values = vec![vec![Vec::with_capacity(ns); nc]; nr];
    for (i, v) in cells.into_iter().enumerate() {
        values[i / (nc * ns)][(i / ns) % nc].push(v);
    }
    let baseline_values = (0..nr)
        .map(|r| {
            let set = spec.cell_constraints(r, 0, len);
            unconditional.iter().map(|s| spec.measure(s, &set)).collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let stats: Vec<Vec<(f64, f64)>> = values
        .iter()
        .map(|row| row.iter().map(|v| mean_std(v)).collect())
        .collect();
    let baseline: Vec<(f64, f64)> = baseline_values.iter().map(|v| mean_std(v)).collect();
    Ok(SweepReport {
        spec: spec.clone(),
        row_label: row_label.into(),
        rows,
        column_label: column_label.into(),
        columns,
        mean: stats.iter().map(|r| r.iter().map(|p| p.0).collect()).collect(),
        std: stats.iter().map(|r| r.iter().map(|p| p.1).collect()).collect(),
        baseline_mean: baseline.iter().map(|p| p.0).collect(),
        baseline_std: baseline.iter().map(|p| p.1).collect(),
        seeds: seeds.to_vec(),
        values,
        baseline_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(t: usize, v: f64) -> PointConstraint {
        PointConstraint { t, v, c: 0, w: 1.0 }
    }

    #[test]
    fn mad_values() {
        let s = Series::from_vec(2, 1, vec![0.3, 0.9]).unwrap();
        assert_eq!(mad(std::slice::from_ref(&s), &[pt(0, 0.3), pt(1, 0.9)]).unwrap(), 0.0);
        let one = Series::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(mad(&[one], &[pt(0, 0.0), pt(1, 0.0)]).unwrap(), 1.5);
        assert!(mad(&[s], &[]).is_err());
    }

    #[test]
    fn mad_is_order_invariant() {
        let a = Series::from_vec(3, 1, vec![0.1, 0.5, 0.2]).unwrap();
        let b = Series::from_vec(3, 1, vec![0.9, 0.4, 0.7]).unwrap();
        let anchors = [pt(0, 0.3), pt(2, 0.6), pt(1, 0.0)];
        let mut rev = anchors;
        rev.reverse();
        let x = mad(&[a.clone(), b.clone()], &anchors).unwrap();
        let y = mad(&[b, a], &rev).unwrap();
        assert!((x - y).abs() < 1e-15);
    }

    fn sum_seg(s: usize, e: usize, stat: Statistic) -> SegmentConstraint {
        SegmentConstraint {
            s,
            e,
            c: 0,
            stat,
            target: 0.0,
            beta: 1.0,
            w: 1.0,
        }
    }

    #[test]
    fn achieved_statistics() {
        assert_eq!(achieved_stat(&Series::zeros(4, 2), &sum_seg(0, 3, Statistic::Sum)), 0.0);
        let s = Series::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(achieved_stat(&s, &sum_seg(0, 2, Statistic::Sum)), 6.0);
        assert_eq!(achieved_stat(&s, &sum_seg(0, 2, Statistic::Average)), 2.0);
        // additive over disjoint segments
        let whole = achieved_stat(&s, &sum_seg(0, 2, Statistic::Sum));
        let parts = achieved_stat(&s, &sum_seg(0, 0, Statistic::Sum)) + achieved_stat(&s, &sum_seg(1, 2, Statistic::Sum));
        assert_eq!(whole, parts);
    }

    #[test]
    fn kde_properties() {
        let values = [0.1, 0.4, 0.45, 0.8, 1.3, -0.2, 0.6];
        let h = silverman_bandwidth(&values).unwrap();
        let lo = -0.2 - 5.0 * h;
        let hi = 1.3 + 5.0 * h;
        let n = 4001;
        let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let d = kde(&values, &grid).unwrap();
        assert!(d.iter().all(|v| *v >= 0.0));
        let dx = (hi - lo) / (n - 1) as f64;
        let integral: f64 = d.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum();
        assert!((integral - 1.0).abs() < 1e-2, "{integral}");
    }

    #[test]
    fn kde_symmetry_and_errors() {
        let d = kde(&[-0.7, 0.7], &[-1.3, -0.2, 0.0, 0.2, 1.3]).unwrap();
        assert!((d[0] - d[4]).abs() < 1e-12);
        assert!((d[1] - d[3]).abs() < 1e-12);
        assert!(kde(&[0.5, 0.5, 0.5], &[0.0]).is_err());
        assert!(kde(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn anchor_positions_on_default_grid() {
        let pts = anchor_points(&[0.1, 0.3, 0.5, 0.7, 0.9], 24, 0.8, 0, 0.5);
        assert_eq!(pts.iter().map(|p| p.t).collect::<Vec<_>>(), vec![2, 7, 12, 17, 22]);
    }

    #[test]
    fn report_csv_shape() {
        let report = SweepReport {
            spec: SweepSpec::default_confidence(),
            row_label: "value".into(),
            rows: vec![0.1, 0.8],
            column_label: "confidence".into(),
            columns: vec![0.01, 0.5, 1.0],
            mean: vec![vec![0.3, 0.2, 0.0], vec![0.4, 0.1, 0.0]],
            std: vec![vec![0.0; 3]; 2],
            baseline_mean: vec![0.5, 0.5],
            baseline_std: vec![0.0, 0.0],
            seeds: vec![0],
            values: vec![vec![vec![0.0]; 3]; 2],
            baseline_values: vec![vec![0.5]; 2],
        };
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "value,0.01,0.5,1");
        assert_eq!(lines[1], "0.1,0.3,0.2,0");
        assert_eq!(lines.len(), 3);
    }
}
