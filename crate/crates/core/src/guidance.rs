//! Guided reverse diffusion.
//!
//! Each reverse step predicts x̂₀, refines it with the gradient of the
//! constraint objective taken through the network with respect to `x_t`,
//! forms the DDPM posterior step from the refined estimate, and finally
//! blends the new iterate with forward-noised observations using the float
//! mask scaled by the time weight `ω`.
//!
//! The objective at a refined estimate `x̃ = x̂₀ + δ` is
//!
//! ```text
//! Σ m ⊙ (x̃ - x_ob)²  +  κ ‖x̃ - x̂₀‖²  +  ω Σ_j β_j w_j (agg_j(x̃) - target_j)²
//! ```
//!
//! The first term pulls toward the anchors, the second keeps repeated
//! refinements close to the network's prediction, the third is the segment
//! statistics penalty. Its cotangent at `x̃` is pulled back through the
//! denoiser Jacobian to get a gradient in `x_t`, and the estimate moves
//! against that gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    adjust_mask, time_weight, ConstraintSet, FloatMask, ObservedCanvas, SegmentConstraint, Statistic,
};
use crate::denoiser::{Denoiser, InputJacobian};
use crate::diffusion::{posterior_step, q_sample_with, standard_normal, NoiseSchedule};
use crate::{Error, Result, Series};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Decay `γ` of the time weight `ω_t = exp(-γ t / T)`.
    pub gamma_decay: f64,
    /// Step size `η` of the refinement.
    pub eta: f64,
    /// Weight `κ` of the proximal term.
    pub kappa: f64,
    /// Refinement iterations per diffusion step.
    pub inner_steps: usize,
    /// Rate `ρ` of the dynamic mask update.
    pub mask_rate: f64,
    pub dynamic_mask: bool,
    pub use_time_weight: bool,
    /// Max L2 norm of the guidance gradient per refinement iteration.
    pub clip_norm: f64,
    /// Bounds applied to x̂₀ before refinement.
    pub clamp: (f64, f64),
    /// Record per-step diagnostics.
    pub trace: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma_decay: 5.0,
            eta: 0.1,
            kappa: 0.01,
            inner_steps: 1,
            mask_rate: 0.05,
            dynamic_mask: true,
            use_time_weight: true,
            clip_norm: 10.0,
            clamp: (-0.5, 1.5),
            trace: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !(self.kappa >= 0.0) || self.inner_steps == 0 {
            return Err(Error::Config("guidance needs η ≥ 0, κ ≥ 0 and at least one inner step".into()));
        }
        if !(self.gamma_decay >= 0.0) || !(self.mask_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("γ and ρ must be ≥ 0 and the clip norm positive".into()));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Config(format!("empty clamp range {:?}", self.clamp)));
        }
        Ok(())
    }
}

/// Diagnostics for one reverse step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    /// Time weight applied to the statistics penalty.
    pub omega: f64,
    /// Objective value at the start of refinement.
    pub loss: f64,
    /// Norm of the first guidance gradient, before clipping.
    pub grad_norm: f64,
    /// Sum of the float mask after this step.
    pub mask_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub series: Series,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
}

/// Statistics penalty `ω Σ_j β_j w_j (agg_j(x) - target_j)²` and its
/// gradient with respect to `x`.
pub fn stat_loss_and_grad(x: &Series, segments: &[SegmentConstraint], omega: f64) -> (f64, Series) {
    let mut grad = Series::zeros(x.len(), x.channels());
    let mut loss = 0.0;
    for seg in segments {
        let gap = seg.aggregate(x) - seg.target;
        let weight = omega * seg.beta * seg.w;
        loss += weight * gap * gap;
        let mut d = 2.0 * weight * gap;
        if seg.stat == Statistic::Average {
            d /= seg.width() as f64;
        }
        for t in seg.s..=seg.e {
            let g = grad.get(t, seg.c);
            grad.set(t, seg.c, g + d);
        }
    }
    (loss, grad)
}

/// The guidance objective at one reverse step.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceObjective<'a> {
    pub values: &'a Series,
    pub mask: &'a FloatMask,
    pub segments: &'a [SegmentConstraint],
    /// Time weight on the statistics term.
    pub omega: f64,
    pub kappa: f64,
}

impl GuidanceObjective<'_> {
    /// Objective value at `refined` and its gradient with respect to
    /// `refined`. `anchor` is the unrefined prediction of the proximal term.
    pub fn evaluate(&self, refined: &Series, anchor: &Series) -> (f64, Series) {
        let (mut loss, mut grad) = stat_loss_and_grad(refined, self.segments, self.omega);
        let cells = refined
            .as_slice()
            .iter()
            .zip(self.values.as_slice())
            .zip(self.mask.as_slice())
            .zip(anchor.as_slice());
        for (g, (((&x, &ob), &m), &a)) in grad.as_mut_slice().iter_mut().zip(cells) {
            loss += m * (x - ob) * (x - ob) + self.kappa * (x - a) * (x - a);
            *g += 2.0 * m * (x - ob) + 2.0 * self.kappa * (x - a);
        }
        (loss, grad)
    }

    fn is_trivial(&self) -> bool {
        self.segments.is_empty() && self.mask.is_zero()
    }
}

/// Gradient in `x_t` of the objective at `x̃ = x̂₀(x_t) + (refined - x̂₀)`,
/// for a forward pass kept in `pass`.
pub fn objective_grad(
    pass: &InputJacobian<'_>,
    objective: &GuidanceObjective<'_>,
    refined: &Series,
    anchor: &Series,
) -> Result<(f64, Series)> {
    let (loss, cotangent) = objective.evaluate(refined, anchor);
    let grad = pass.vjp(&cotangent)?;
    Ok((loss, grad))
}

/// `∇_{x_t}` of the masked reconstruction loss `Σ m ⊙ (x̂₀(x_t) - x_ob)²`
/// plus the proximal term, which vanishes before any refinement.
pub fn reconstruction_grad(
    model: &Denoiser,
    x_t: &Series,
    t: usize,
    canvas: &ObservedCanvas,
    kappa: f64,
) -> Result<Series> {
    let objective = GuidanceObjective {
        values: &canvas.values,
        mask: &canvas.mask,
        segments: &[],
        omega: 1.0,
        kappa,
    };
    let grad = model.with_input_jacobian(x_t, t, |pass| {
        let x0 = pass.prediction();
        Ok(objective_grad(pass, &objective, x0, x0)?.1)
    })?;
    if !grad.is_finite() {
        return Err(Error::Numeric(format!("reconstruction gradient is not finite at step {t}")));
    }
    Ok(grad)
}

/// `ω m ⊙ x_ob_t + (1 - ω m) ⊙ x_cand`, cell by cell.
pub fn blend_observed(x_cand: &Series, mask: &FloatMask, omega: f64, x_ob_t: &Series) -> Result<Series> {
    let (len, channels) = x_cand.shape();
    mask.as_series().ensure_shape(len, channels, "mask")?;
    x_ob_t.ensure_shape(len, channels, "observed values")?;
    let data = x_cand
        .as_slice()
        .iter()
        .zip(x_ob_t.as_slice())
        .zip(mask.as_slice())
        .map(|((&x, &ob), &m)| {
            let k = omega * m;
            k * ob + (1.0 - k) * x
        })
        .collect();
    Series::from_vec(len, channels, data)
}

/// Observed values at the noise level of `x_{t-1}` when stepping from `t`:
/// forward-noised to `ᾱ_{t-1}` for `t > 0`, clean at the final step.
pub fn observed_target(x_ob: &Series, t: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Series {
    if t == 0 {
        return x_ob.clone();
    }
    let noise = standard_normal(x_ob.len(), x_ob.channels(), rng);
    q_sample_with(x_ob, sched.alpha_bars()[t - 1], &noise)
}

fn clamp(x: &Series, bounds: (f64, f64)) -> Series {
    x.map(|v| v.clamp(bounds.0, bounds.1))
}

fn main_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The stream used for forward-noising observations, separate from the
/// stream that drives `x_T` and the posterior noise.
pub fn observation_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_model(model: &Denoiser, sched: &NoiseSchedule) -> Result<(usize, usize)> {
    let cfg = model.config();
    if cfg.diffusion_steps != sched.steps() {
        return Err(Error::Config(format!(
            "model was trained for {} steps, schedule has {}",
            cfg.diffusion_steps,
            sched.steps()
        )));
    }
    Ok((cfg.len, cfg.channels))
}

/// Plain DDPM ancestral sampling with clamped x̂₀.
pub fn sample_unconditional(
    model: &Denoiser,
    sched: &NoiseSchedule,
    clamp_bounds: (f64, f64),
    seed: u64,
) -> Result<Series> {
    let (len, channels) = check_model(model, sched)?;
    let mut rng = main_rng(seed);
    let mut x = standard_normal(len, channels, &mut rng);
    for t in (0..sched.steps()).rev() {
        let x0 = clamp(&model.predict_x0(&x, t)?, clamp_bounds);
        let z = if t > 0 {
            standard_normal(len, channels, &mut rng)
        } else {
            Series::zeros(len, channels)
        };
        x = posterior_step(&x, &x0, t, sched, &z)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite iterate at step {t}")));
        }
    }
    Ok(x)
}

fn norm(x: &Series) -> f64 {
    x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs the guided reverse process from `x_T ~ N(0, I)` drawn with `seed`.
pub fn sample_guided(
    model: &Denoiser,
    sched: &NoiseSchedule,
    constraints: &ConstraintSet,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<EditResult> {
    cfg.validate()?;
    let (len, channels) = check_model(model, sched)?;
    let canvas = constraints.compile(len, channels)?;
    let steps = sched.steps();
    let weight = |level: usize| {
        if cfg.use_time_weight {
            time_weight(level, steps, cfg.gamma_decay)
        } else {
            1.0
        }
    };

    let mut rng = main_rng(seed);
    let mut obs_rng = observation_rng(seed);
    let mut mask = canvas.mask.clone();
    let mut trace = cfg.trace.then(Vec::new);
    let mut x = standard_normal(len, channels, &mut rng);

    for t in (0..steps).rev() {
        // Level t is index t + 1 in the 1-based convention of ω.
        let omega = weight(t + 1);
        let objective = GuidanceObjective {
            values: &canvas.values,
            mask: &mask,
            segments: &constraints.segments,
            omega,
            kappa: cfg.kappa,
        };
        let guided = !objective.is_trivial() && cfg.eta > 0.0;
        let (refined, x0, loss, grad_norm) = model.with_input_jacobian(&x, t, |pass| {
            let x0 = clamp(pass.prediction(), cfg.clamp);
            if !guided {
                return Ok((x0.clone(), x0, 0.0, 0.0));
            }
            let mut refined = x0.clone();
            let (mut first_loss, mut first_norm) = (0.0, 0.0);
            for k in 0..cfg.inner_steps {
                let (loss, mut grad) = objective_grad(pass, &objective, &refined, &x0)?;
                let n = norm(&grad);
                if !n.is_finite() || !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "guidance gradient is not finite at step {t} (inner {k}, loss {loss})"
                    )));
                }
                if k == 0 {
                    (first_loss, first_norm) = (loss, n);
                }
                if n > cfg.clip_norm {
                    let s = cfg.clip_norm / n;
                    grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
                }
                refined = refined.zip_map(&grad, |r, g| r - cfg.eta * g);
            }
            Ok((refined, x0, first_loss, first_norm))
        })?;

        let z = if t > 0 {
            standard_normal(len, channels, &mut rng)
        } else {
            Series::zeros(len, channels)
        };
        let mut next = posterior_step(&x, &refined, t, sched, &z)?;
        if !canvas.is_empty() {
            let target = observed_target(&canvas.values, t, sched, &mut obs_rng);
            next = blend_observed(&next, &mask, weight(t), &target)?;
            if cfg.dynamic_mask {
                mask = adjust_mask(&mask, &x0, &canvas, cfg.mask_rate);
            }
        }
        if !next.is_finite() {
            let recent = trace
                .as_ref()
                .map(|tr: &Vec<StepTrace>| tr.iter().rev().take(5).map(|s| s.loss).collect::<Vec<_>>())
                .unwrap_or_default();
            return Err(Error::Numeric(format!(
                "non-finite iterate at step {t} (loss {loss}, recent losses {recent:?})"
            )));
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(StepTrace {
                t,
                omega,
                loss,
                grad_norm,
                mask_total: mask.total(),
            });
        }
        x = next;
    }
    Ok(EditResult { series: x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{compile_points, PointConstraint};
    use crate::denoiser::DenoiserConfig;

    fn seg(s: usize, e: usize, stat: Statistic, target: f64, beta: f64) -> SegmentConstraint {
        SegmentConstraint {
            s,
            e,
            c: 0,
            stat,
            target,
            beta,
            w: 1.0,
        }
    }

    fn tiny() -> (Denoiser, NoiseSchedule) {
        let cfg = DenoiserConfig {
            len: 6,
            channels: 2,
            hidden: vec![16, 16],
            embed_dim: 4,
            diffusion_steps: 20,
        };
        let model = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (model, NoiseSchedule::linear(20, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn stat_loss_at_target_is_zero() {
        let x = Series::filled(4, 1, 0.5);
        let (loss, grad) = stat_loss_and_grad(&x, &[seg(0, 3, Statistic::Sum, 2.0, 3.0)], 0.7);
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stat_loss_worked_example() {
        let x = Series::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (loss, grad) = stat_loss_and_grad(&x, &[seg(0, 3, Statistic::Sum, 4.0, 1.0)], 1.0);
        assert_eq!(loss, 36.0);
        assert_eq!(grad.as_slice(), &[12.0; 4]);

        let (loss, grad) = stat_loss_and_grad(&x, &[seg(0, 3, Statistic::Average, 1.5, 1.0)], 1.0);
        assert_eq!(loss, 1.0);
        assert_eq!(grad.as_slice(), &[0.5; 4]);
    }

    #[test]
    fn stat_loss_without_segments() {
        let x = Series::filled(3, 2, 1.0);
        let (loss, grad) = stat_loss_and_grad(&x, &[], 1.0);
        assert_eq!(loss, 0.0);
        assert_eq!(grad, Series::zeros(3, 2));
    }

    #[test]
    fn blend_cases() {
        let x = Series::from_vec(1, 3, vec![0.0, 5.0, 0.0]).unwrap();
        let ob = Series::from_vec(1, 3, vec![2.0, 9.0, 2.0]).unwrap();
        let mask = FloatMask::new(Series::from_vec(1, 3, vec![0.5, 1.0, 0.0]).unwrap()).unwrap();
        let out = blend_observed(&x, &mask, 1.0, &ob).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 9.0, 0.0]);
        let none = FloatMask::zeros(1, 3);
        assert_eq!(blend_observed(&x, &none, 0.3, &ob).unwrap(), x);
        assert!(blend_observed(&x, &none, 1.0, &Series::zeros(2, 3)).is_err());
    }

    #[test]
    fn empty_canvas_has_zero_reconstruction_gradient() {
        let (model, _) = tiny();
        let x = Series::filled(6, 2, 0.3);
        let g = reconstruction_grad(&model, &x, 5, &ObservedCanvas::empty(6, 2), 0.01).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reconstruction_gradient_is_linear_in_mask() {
        let (model, _) = tiny();
        let x = Series::from_vec(6, 2, (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let pts = [
            PointConstraint { t: 1, v: 0.9, c: 0, w: 0.3 },
            PointConstraint { t: 4, v: 0.1, c: 1, w: 0.45 },
        ];
        let single = compile_points(&pts, 6, 2).unwrap();
        let doubled: Vec<_> = pts.iter().map(|p| PointConstraint { w: 2.0 * p.w, ..*p }).collect();
        let double = compile_points(&doubled, 6, 2).unwrap();
        let g1 = reconstruction_grad(&model, &x, 7, &single, 0.01).unwrap();
        let g2 = reconstruction_grad(&model, &x, 7, &double, 0.01).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_constraints_match_plain_sampler() {
        let (model, sched) = tiny();
        let cfg = GuidanceConfig::default();
        for seed in 0..3 {
            let plain = sample_unconditional(&model, &sched, cfg.clamp, seed).unwrap();
            let guided = sample_guided(&model, &sched, &ConstraintSet::default(), &cfg, seed).unwrap();
            assert_eq!(plain, guided.series);
        }
    }

    #[test]
    fn hard_anchors_are_exact_and_trace_is_recorded() {
        let (model, sched) = tiny();
        let set = ConstraintSet {
            points: vec![
                PointConstraint { t: 0, v: 0.1, c: 0, w: 1.0 },
                PointConstraint { t: 5, v: 0.8, c: 1, w: 1.0 },
            ],
            ..Default::default()
        };
        let cfg = GuidanceConfig {
            trace: true,
            ..Default::default()
        };
        let out = sample_guided(&model, &sched, &set, &cfg, 11).unwrap();
        assert_eq!(out.series.get(0, 0), 0.1);
        assert_eq!(out.series.get(5, 1), 0.8);
        let trace = out.trace.unwrap();
        assert_eq!(trace.len(), 20);
        assert_eq!(trace.last().unwrap().t, 0);
    }

    #[test]
    fn rejects_mismatched_schedule() {
        let (model, _) = tiny();
        let other = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
        assert!(sample_guided(&model, &other, &ConstraintSet::default(), &GuidanceConfig::default(), 0).is_err());
    }

    #[test]
    fn out_of_range_constraints_are_reported() {
        let (model, sched) = tiny();
        let set = ConstraintSet {
            points: vec![PointConstraint { t: 6, v: 0.1, c: 0, w: 1.0 }],
            ..Default::default()
        };
        let err = sample_guided(&model, &sched, &set, &GuidanceConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
    }
}
