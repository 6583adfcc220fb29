//! Acceptance suite.
//!
//! Trains the reference sine model through the `tsedit` binary (1000 series,
//! 24 steps, 5 channels, 200 diffusion steps), then checks every acceptance
//! criterion against it and prints one PASS/FAIL line per criterion. The
//! process exits non-zero if any criterion fails.

use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsedit::autodiff::{forward_eval, Bindings, Graph, NodeId, Tensor};
use tsedit::checkpoint::Checkpoint;
use tsedit::constraints::{ConstraintSet, SegmentConstraint, Statistic, TrendConstraint};
use tsedit::denoiser::{Denoiser, Layer};
use tsedit::diffusion::{loss_and_grads, q_sample, standard_normal, Example, NoiseSchedule};
use tsedit::guidance::{sample_guided, sample_unconditional, stat_loss_and_grad, GuidanceConfig};
use tsedit::metrics::{anchor_points, mad, run_sweep, SweepSpec};
use tsedit::Series;

const SEEDS: u64 = 20;
const POSITIONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

struct Ctx {
    dir: tempfile::TempDir,
    ck: Checkpoint,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    jobs: usize,
    uncond: Vec<Series>,
}

impl Ctx {
    fn model(&self) -> &Denoiser {
        &self.ck.model
    }

    fn len(&self) -> usize {
        self.model().config().len
    }

    fn guided(&self, set: &ConstraintSet) -> Vec<Series> {
        (0..SEEDS)
            .map(|s| sample_guided(self.model(), &self.sched, set, &self.guidance, s).unwrap().series)
            .collect()
    }
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn(&Ctx) -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn segment_sum(x: &Series, c: usize, s: usize, e: usize) -> f64 {
    (s..=e).map(|t| x.get(t, c)).sum()
}

/// `|a - b|` relative to the larger magnitude, or absolute when both are tiny.
fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs() / 1e-6
    } else {
        (a - b).abs() / scale
    }
}

fn main() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("run");
    let t0 = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_tsedit"))
        .args(["train", "--seed", "0", "--out"])
        .arg(&out)
        .stdout(Stdio::null())
        .status()
        .expect("tsedit runs");
    assert!(status.success(), "training failed");
    let ck = Checkpoint::load(out.join("checkpoint.json")).expect("checkpoint loads");
    println!("trained reference model in {:.1?}: {:?}", t0.elapsed(), ck.train_report);
    let sched = ck.schedule().unwrap();
    let guidance = GuidanceConfig::default();
    let uncond = (0..SEEDS)
        .map(|s| sample_unconditional(&ck.model, &sched, guidance.clamp, s).unwrap())
        .collect();
    let ctx = Ctx {
        dir,
        ck,
        sched,
        guidance,
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        uncond,
    };

    let criteria: Vec<Criterion> = vec![
        ("autodiff gradients vs finite differences", Some(Duration::from_secs(30)), autodiff_oracle),
        ("forward-process moments", None, forward_moments),
        ("no-constraint equivalence", None, no_constraint_equivalence),
        ("hard-anchor exactness", None, hard_anchor_exactness),
        ("confidence monotonicity", Some(Duration::from_secs(180)), confidence_monotonicity),
        ("sum-control direction", None, sum_direction),
        ("weight insensitivity", None, weight_insensitivity),
        ("segment control", None, segment_control),
        ("trend control", None, trend_control),
        ("statistics-gradient oracle", None, stat_gradient_oracle),
        ("edit determinism", None, edit_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut outcome = run(&ctx);
        let took = t.elapsed();
        if let (Some(limit), Ok(detail)) = (budget, &outcome) {
            if took > *limit {
                outcome = Err(format!("{detail}; took {took:.1?}, budget {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{took:.1?}]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1?}",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

/// A random scalar-valued graph over two vector leaves and a matrix leaf.
fn random_graph(rng: &mut ChaCha8Rng) -> (Graph, Vec<(NodeId, Tensor)>, NodeId) {
    let n = rng.random_range(2..=5);
    let mut g = Graph::new();
    let x = g.leaf("x");
    let y = g.leaf("y");
    let w = g.leaf("w");
    let mut vec = |len: usize| Tensor::vector((0..len).map(|_| rng.random_range(-1.5..1.5)).collect());
    let leaves = vec![(x, vec(n)), (y, vec(n)), (w, {
        let data = vec(n * n).into_data();
        Tensor::matrix(n, n, data).unwrap()
    })];
    let mut pool = vec![x, y];
    let ops = rng.random_range(3..=8);
    for _ in 0..ops {
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        let node = match rng.random_range(0..9) {
            0 => g.add(a, b),
            1 => g.sub(a, b),
            2 => g.mul(a, b),
            3 => g.tanh(a),
            4 => g.sin(a),
            5 => g.cos(a),
            6 => g.scale(a, rng.random_range(-2.0..2.0)),
            7 => g.matmul(a, w),
            _ => g.matmul(w, a),
        };
        pool.push(node);
    }
    let last = *pool.last().unwrap();
    let other = pool[rng.random_range(0..pool.len())];
    let joined = g.concat(last, other);
    let output = match rng.random_range(0..3) {
        0 => g.sum(joined),
        1 => g.sum_ranges(joined, vec![0..n, 1..2 * n]),
        _ => {
            let c = g.constant(Tensor::vector(vec![0.3; 2 * n]));
            g.squared_distance(joined, c)
        }
    };
    (g, leaves, output)
}

fn autodiff_oracle(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let graphs = 150;
    for _ in 0..graphs {
        let (g, leaves, out) = random_graph(&mut rng);
        let mut b = Bindings::new();
        for (id, v) in &leaves {
            b.bind(*id, v);
        }
        let ids: Vec<NodeId> = leaves.iter().map(|(id, _)| *id).collect();
        let grads = forward_eval(&g, &b).unwrap().backward(out, &ids, None).unwrap();
        for (id, v) in &leaves {
            for i in 0..v.len() {
                let probe = |delta: f64| {
                    let mut t = v.clone();
                    t.data_mut()[i] += delta;
                    let mut b2 = b.clone();
                    b2.bind_owned(*id, t);
                    forward_eval(&g, &b2).unwrap().value(out).item()
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                worst = worst.max(rel_err(grads[id].data()[i], numeric));
            }
        }
    }

    // Full denoiser: input VJP against a directional derivative, and
    // parameter gradients on sampled coordinates plus one random direction.
    let model = ctx.model();
    let cfg = model.config().clone();
    let x_t = standard_normal(cfg.len, cfg.channels, &mut rng);
    let cot = standard_normal(cfg.len, cfg.channels, &mut rng);
    let t = 57;
    let proj = |x: &Series| -> f64 {
        let p = model.predict_x0(x, t).unwrap();
        p.as_slice().iter().zip(cot.as_slice()).map(|(a, b)| a * b).sum()
    };
    let vjp = model.with_input_jacobian(&x_t, t, |pass| pass.vjp(&cot)).unwrap();
    let mut worst_input: f64 = 0.0;
    for i in 0..x_t.as_slice().len() {
        let shifted = |d: f64| {
            let mut x = x_t.clone();
            x.as_mut_slice()[i] += d;
            proj(&x)
        };
        let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        worst_input = worst_input.max(rel_err(vjp.as_slice()[i], numeric));
    }

    let examples: Vec<Example> = ctx.uncond[..4]
        .iter()
        .enumerate()
        .map(|(i, x0)| Example {
            x_t: q_sample(x0, 40 * i + 10, &ctx.sched, &standard_normal(cfg.len, cfg.channels, &mut rng)).unwrap(),
            t: 40 * i + 10,
            x0: x0.clone(),
        })
        .collect();
    let (_, grads) = loss_and_grads(model, &examples).unwrap();
    let perturbed = |f: &dyn Fn(&mut [Layer])| {
        let mut layers = model.layers().to_vec();
        f(&mut layers);
        let m = Denoiser::from_parts(cfg.clone(), layers).unwrap();
        loss_and_grads(&m, &examples).unwrap().0
    };
    let mut worst_param: f64 = 0.0;
    for _ in 0..200 {
        let l = rng.random_range(0..grads.len());
        let bias = rng.random_bool(0.3);
        let size = if bias { grads[l].bias.len() } else { grads[l].weight.len() };
        let i = rng.random_range(0..size);
        let bump = |d: f64| {
            move |layers: &mut [Layer]| {
                let t = if bias { &mut layers[l].bias } else { &mut layers[l].weight };
                t.data_mut()[i] += d;
            }
        };
        let numeric = (perturbed(&bump(eps)) - perturbed(&bump(-eps))) / (2.0 * eps);
        let analytic = if bias { grads[l].bias.data()[i] } else { grads[l].weight.data()[i] };
        worst_param = worst_param.max(rel_err(analytic, numeric));
    }
    let mut random = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let dir: Vec<(Vec<f64>, Vec<f64>)> = grads.iter().map(|g| (random(g.weight.len()), random(g.bias.len()))).collect();
    let along = |d: f64| {
        perturbed(&|layers: &mut [Layer]| {
            for (layer, (dw, db)) in layers.iter_mut().zip(&dir) {
                layer.weight.data_mut().iter_mut().zip(dw).for_each(|(p, v)| *p += d * v);
                layer.bias.data_mut().iter_mut().zip(db).for_each(|(p, v)| *p += d * v);
            }
        })
    };
    let numeric = (along(eps) - along(-eps)) / (2.0 * eps);
    let analytic: f64 = grads
        .iter()
        .zip(&dir)
        .map(|(g, (dw, db))| {
            g.weight.data().iter().zip(dw).map(|(a, b)| a * b).sum::<f64>()
                + g.bias.data().iter().zip(db).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    let worst_dir = rel_err(analytic, numeric);
    let all = worst.max(worst_input).max(worst_param).max(worst_dir);
    check(
        all <= 1e-4,
        format!(
            "{graphs} random graphs max rel err {worst:.2e}; denoiser input {worst_input:.2e}, \
             parameters {worst_param:.2e} (200 coordinates), direction {worst_dir:.2e}; tolerance 1e-4"
        ),
    )
}

fn forward_moments(ctx: &Ctx) -> Outcome {
    let x0 = &ctx.uncond[0];
    let (len, ch) = x0.shape();
    let cells = (len * ch) as f64;
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = Vec::new();
    let mut ok = true;
    for t in [0, 49, 99, 149, 199] {
        let ab = ctx.sched.alpha_bars()[t];
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let noise = standard_normal(len, ch, &mut rng);
            let x_t = q_sample(x0, t, &ctx.sched, &noise).unwrap();
            for (xt, x) in x_t.as_slice().iter().zip(x0.as_slice()) {
                let r = xt - ab.sqrt() * x;
                s1 += r;
                s2 += r * r;
            }
        }
        let n = draws as f64 * cells;
        let m = s1 / n;
        let var = s2 / n - m * m;
        let target = 1.0 - ab;
        let se_mean = (target / n).sqrt();
        let se_var = target * (2.0 / (n - 1.0)).sqrt();
        let (zm, zv) = (m / se_mean, (var - target) / se_var);
        ok &= zm.abs() <= 3.0 && zv.abs() <= 3.0;
        notes.push(format!("t={t}: z_mean {zm:+.2}, z_var {zv:+.2}"));
    }
    check(ok, format!("{} (10^4 draws × {cells} cells, limit 3 SE)", notes.join("; ")))
}

fn no_constraint_equivalence(ctx: &Ctx) -> Outcome {
    let empty = ConstraintSet::default();
    let mut differing = Vec::new();
    for seed in 0..10u64 {
        let guided = sample_guided(ctx.model(), &ctx.sched, &empty, &ctx.guidance, seed).unwrap().series;
        let plain = &ctx.uncond[seed as usize];
        let same = guided.as_slice().iter().zip(plain.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            differing.push(seed);
        }
    }
    check(differing.is_empty(), format!("10 seeds, bit-differing seeds: {differing:?}"))
}

fn hard_anchor_exactness(ctx: &Ctx) -> Outcome {
    let mut worst: f64 = 0.0;
    for v in [0.1, 0.8, 1.0] {
        let set = ConstraintSet {
            points: anchor_points(&POSITIONS, ctx.len(), v, 0, 1.0),
            ..Default::default()
        };
        for s in ctx.guided(&set) {
            worst = worst.max(mad(std::slice::from_ref(&s), &set.points).unwrap());
        }
    }
    check(worst <= 1e-9, format!("worst per-seed MAD {worst:.1e} over 3 values × 20 seeds (limit 1e-9)"))
}

fn confidence_monotonicity(ctx: &Ctx) -> Outcome {
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let report = run_sweep(ctx.model(), &ctx.sched, &SweepSpec::default_confidence(), &ctx.guidance, &seeds, ctx.jobs).unwrap();
    let mut ok = true;
    let mut rows = Vec::new();
    for (r, v) in report.rows.iter().enumerate() {
        let u = report.baseline_mean[r];
        let m = &report.mean[r];
        ok &= u > m[0] && m[0] >= m[1] && m[1] >= m[2] && m[2] == 0.0 && m[0] <= 0.6 * u;
        rows.push(format!("v={v}: {u:.4} > {:.4} ≥ {:.4} ≥ {:.4}", m[0], m[1], m[2]));
    }
    check(ok, format!("uncond > c=0.01 ≥ 0.5 ≥ 1.0 = 0 with c=0.01 ≤ 0.6·uncond; {}", rows.join("; ")))
}

fn whole_sum(len: usize, target: f64, beta: f64) -> ConstraintSet {
    ConstraintSet {
        segments: vec![SegmentConstraint {
            s: 0,
            e: len - 1,
            c: 0,
            stat: Statistic::Sum,
            target,
            beta,
            w: 1.0,
        }],
        ..Default::default()
    }
}

fn uncond_sum(ctx: &Ctx) -> f64 {
    mean(ctx.uncond.iter().map(|s| s.channel(0).sum::<f64>()))
}

fn sum_direction(ctx: &Ctx) -> Outcome {
    let u = uncond_sum(ctx);
    let achieved = |target: f64| mean(ctx.guided(&whole_sum(ctx.len(), target, 1.0)).iter().map(|s| s.channel(0).sum::<f64>()));
    let up = achieved(u + 5.0);
    let down = achieved(u - 5.0);
    let grid = [-100.0, 20.0, 50.0, 150.0];
    let sums: Vec<f64> = grid.iter().map(|&t| achieved(t)).collect();
    let ordered = sums.windows(2).all(|w| w[0] < w[1]);
    check(
        up > u && down < u && ordered,
        format!(
            "uncond {u:.4}; target +5 → {up:.4}, target −5 → {down:.4}; grid {grid:?} → {:?}",
            sums.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn weight_insensitivity(ctx: &Ctx) -> Outcome {
    let u = uncond_sum(ctx);
    let means: Vec<f64> = [1.0, 10.0, 50.0, 100.0]
        .iter()
        .map(|&beta| mean(ctx.guided(&whole_sum(ctx.len(), -100.0, beta)).iter().map(|s| s.channel(0).sum::<f64>())))
        .collect();
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = (u - mean(means.iter().copied())).abs();
    check(
        hi - lo < 0.1 * shift,
        format!(
            "target −100, β ∈ {{1, 10, 50, 100}} → {:?}; spread {:.4} vs 10% of shift {:.4}",
            means.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>(),
            hi - lo,
            0.1 * shift
        ),
    )
}

fn segment_control(ctx: &Ctx) -> Outcome {
    let len = ctx.len();
    let s = (0.4 * len as f64).round() as usize;
    let e = (0.6 * len as f64).round() as usize;
    let base = mean(ctx.uncond.iter().map(|x| segment_sum(x, 0, s, e)));
    let set = ConstraintSet {
        segments: vec![SegmentConstraint {
            s,
            e,
            c: 0,
            stat: Statistic::Sum,
            target: base + 2.0,
            beta: 1.0,
            w: 1.0,
        }],
        ..Default::default()
    };
    let out = ctx.guided(&set);
    let delta = |a: usize, b: usize| {
        mean(out.iter().map(|x| segment_sum(x, 0, a, b))) - mean(ctx.uncond.iter().map(|x| segment_sum(x, 0, a, b)))
    };
    let controlled = delta(s, e);
    let left = delta(0, s - 1);
    let right = delta(e + 1, len - 1);
    check(
        controlled > 0.0 && left.abs() < controlled && right.abs() < controlled,
        format!("segment {s}..={e} (target uncond + 2): Δ {controlled:+.4}; complements Δ {left:+.4} and {right:+.4}"),
    )
}

fn trend_control(ctx: &Ctx) -> Outcome {
    let len = ctx.len();
    let (a, b) = (0.2, 0.8);
    let set = ConstraintSet {
        trends: vec![TrendConstraint {
            knots: vec![(0, a), (len - 1, b)],
            c: 0,
            w: 0.9,
        }],
        ..Default::default()
    };
    let line = |t: usize| a + (b - a) * t as f64 / (len - 1) as f64;
    let dev = |xs: &[Series]| mean(xs.iter().map(|x| mean((0..len).map(|t| (x.get(t, 0) - line(t)).abs()))));
    let guided = dev(&ctx.guided(&set));
    let base = dev(&ctx.uncond);
    check(guided <= 0.5 * base, format!("line 0.2 → 0.8 at w = 0.9: deviation {guided:.4} vs uncond {base:.4} (limit half)"))
}

fn stat_gradient_oracle(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let cases = 200;
    for _ in 0..cases {
        let (len, ch) = (rng.random_range(2..12), rng.random_range(1..4));
        let x = Series::from_vec(len, ch, (0..len * ch).map(|_| rng.random_range(-1.0..2.0)).collect()).unwrap();
        let segments: Vec<SegmentConstraint> = (0..rng.random_range(1..4))
            .map(|_| {
                let s = rng.random_range(0..len);
                SegmentConstraint {
                    s,
                    e: rng.random_range(s..len),
                    c: rng.random_range(0..ch),
                    stat: if rng.random_bool(0.5) { Statistic::Sum } else { Statistic::Average },
                    target: rng.random_range(-3.0..3.0),
                    beta: rng.random_range(0.1..10.0),
                    w: rng.random_range(0.0..=1.0),
                }
            })
            .collect();
        let omega = rng.random_range(0.0..=1.0);
        let (_, grad) = stat_loss_and_grad(&x, &segments, omega);
        for i in 0..len * ch {
            let at = |d: f64| {
                let mut y = x.clone();
                y.as_mut_slice()[i] += d;
                stat_loss_and_grad(&y, &segments, omega).0
            };
            let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
            let a = grad.as_slice()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    check(worst <= 1e-8, format!("{cases} random segment sets, max error {worst:.2e} (limit 1e-8)"))
}

fn edit_determinism(ctx: &Ctx) -> Outcome {
    let base = ctx.dir.path();
    let constraints = base.join("constraints.json");
    std::fs::write(
        &constraints,
        r#"{"points": [{"t": 2, "v": 0.8, "c": 0, "w": 0.5}, {"t": 12, "v": 0.1, "c": 1, "w": 1.0}],
            "trends": [{"knots": [[0, 0.3], [23, 0.7]], "c": 2, "w": 0.4}],
            "segments": [{"s": 10, "e": 14, "c": 0, "stat": "sum", "target": 4.5}]}"#,
    )
    .unwrap();
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_tsedit"))
            .args(["edit", "--n", "3", "--seed", "99", "--checkpoint"])
            .arg(base.join("run/checkpoint.json"))
            .arg("--constraints")
            .arg(&constraints)
            .arg("--out")
            .arg(out)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        (0..3)
            .map(|i| std::fs::read(out.join(format!("edit/series_{i:03}.csv"))).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run(&base.join("edit_a"));
    let b = run(&base.join("edit_b"));
    let bytes: usize = a.iter().map(Vec::len).sum();
    check(a == b, format!("two runs, 3 series, {bytes} CSV bytes compared"))
}
