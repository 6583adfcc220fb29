//! Noise schedule, forward noising, the DDPM posterior step and training of
//! the x₀-predicting denoiser.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_eval, Bindings, Tensor};
use crate::denoiser::{time_embed, Denoiser, Layer};
use crate::{Error, Result, Series};

/// Linear β schedule with its derived products.
///
/// Index 0 is the cleanest step. The posterior at step 0 targets the clean
/// sample, so `ᾱ` one step "before" index 0 is taken to be 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "β range must satisfy 0 < β_min ≤ β_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_vars = (0..steps)
            .map(|t| {
                let prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
                betas[t] * (1.0 - prev) / (1.0 - alpha_bars[t])
            })
            .collect();
        Ok(NoiseSchedule {
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        NoiseSchedule::linear(p.steps, p.beta_min, p.beta_max)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps(),
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    /// `ᾱ` of the level preceding `t` (1 for `t = 0`).
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        if t == 0 {
            return (1.0, 0.0);
        }
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bar_prev(t);
        let c0 = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        let ct = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Config(format!("step {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }
}

/// Draws a standard-normal series.
pub fn standard_normal<R: Rng + ?Sized>(len: usize, channels: usize, rng: &mut R) -> Series {
    let data = (0..len * channels).map(|_| rng.sample(StandardNormal)).collect();
    Series::from_vec(len, channels, data).expect("sized")
}

/// `√ᾱ_t · x0 + √(1-ᾱ_t) · noise`.
pub fn q_sample(x0: &Series, t: usize, sched: &NoiseSchedule, noise: &Series) -> Result<Series> {
    sched.check_step(t)?;
    noise.ensure_shape(x0.len(), x0.channels(), "noise")?;
    Ok(q_sample_with(x0, sched.alpha_bars[t], noise))
}

pub(crate) fn q_sample_with(x0: &Series, alpha_bar: f64, noise: &Series) -> Series {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(noise, |x, e| a * x + b * e)
}

/// One reverse step `x_t → x_{t-1}` from a clean-sample estimate:
/// the DDPM posterior mean plus `σ_t · z`.
pub fn posterior_step(
    x_t: &Series,
    x0_hat: &Series,
    t: usize,
    sched: &NoiseSchedule,
    z: &Series,
) -> Result<Series> {
    sched.check_step(t)?;
    x0_hat.ensure_shape(x_t.len(), x_t.channels(), "x̂₀")?;
    z.ensure_shape(x_t.len(), x_t.channels(), "z")?;
    let (c0, ct) = sched.posterior_coefficients(t);
    let sigma = sched.posterior_vars[t].sqrt();
    let mean = x0_hat.zip_map(x_t, |x0, xt| c0 * x0 + ct * xt);
    Ok(mean.zip_map(z, |m, z| m + sigma * z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            momentum: 0.9,
            steps: 3000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, steps and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-out loss before the first update.
    pub initial_loss: f64,
    /// Held-out loss after the last update.
    pub final_loss: f64,
    /// Mean training loss of the last 100 updates.
    pub final_train_loss: f64,
}

/// A batch of `(x_t, step embedding, x0)` rows.
struct Batch {
    inputs: Tensor,
    embeddings: Tensor,
    targets: Tensor,
}

fn draw_batch<R: Rng + ?Sized>(
    data: &[Series],
    picks: &[usize],
    sched: &NoiseSchedule,
    embed_dim: usize,
    rng: &mut R,
) -> Batch {
    let (len, channels) = data[0].shape();
    let width = len * channels;
    let mut inputs = Vec::with_capacity(picks.len() * width);
    let mut targets = Vec::with_capacity(picks.len() * width);
    let mut embeddings = Vec::with_capacity(picks.len() * embed_dim);
    for &i in picks {
        let t = rng.random_range(0..sched.steps());
        let noise = standard_normal(len, channels, rng);
        let x_t = q_sample_with(&data[i], sched.alpha_bars[t], &noise);
        inputs.extend_from_slice(x_t.as_slice());
        targets.extend_from_slice(data[i].as_slice());
        embeddings.extend(time_embed(t, sched.steps(), embed_dim).expect("validated width"));
    }
    let rows = picks.len();
    Batch {
        inputs: Tensor::matrix(rows, width, inputs).expect("sized"),
        embeddings: Tensor::matrix(rows, embed_dim, embeddings).expect("sized"),
        targets: Tensor::matrix(rows, width, targets).expect("sized"),
    }
}

/// Mean squared error of x̂₀ over a batch, with optional parameter gradients.
fn batch_loss(model: &Denoiser, batch: &Batch, with_grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut net = model.build_graph();
    let target = net.graph.leaf("x0");
    let sq = net.graph.squared_distance(net.output, target);
    let scale = 1.0 / batch.targets.len() as f64;
    let loss = net.graph.scale(sq, scale);

    let mut bindings = Bindings::new();
    bindings
        .bind(net.input, &batch.inputs)
        .bind(net.embedding, &batch.embeddings)
        .bind(target, &batch.targets);
    model.bind_params(&net, &mut bindings);
    let eval = forward_eval(&net.graph, &bindings)?;
    let value = eval.value(loss).item();
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let leaves: Vec<_> = net.params.iter().flat_map(|&(w, b)| [w, b]).collect();
    let mut grads = eval.backward(loss, &leaves, None)?;
    Ok((
        value,
        leaves
            .iter()
            .map(|id| grads.remove(id).expect("requested"))
            .collect(),
    ))
}

/// One training example: the noisy input, its step and the clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x_t: Series,
    pub t: usize,
    pub x0: Series,
}

/// Training loss over `examples` and its gradient, laid out like the
/// model's layers.
pub fn loss_and_grads(model: &Denoiser, examples: &[Example]) -> Result<(f64, Vec<Layer>)> {
    let mc = model.config();
    if examples.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    let width = mc.series_width();
    let mut inputs = Vec::with_capacity(examples.len() * width);
    let mut targets = Vec::with_capacity(examples.len() * width);
    let mut embeddings = Vec::with_capacity(examples.len() * mc.embed_dim);
    for (i, ex) in examples.iter().enumerate() {
        ex.x_t.ensure_shape(mc.len, mc.channels, &format!("examples[{i}].x_t"))?;
        ex.x0.ensure_shape(mc.len, mc.channels, &format!("examples[{i}].x0"))?;
        if ex.t >= mc.diffusion_steps {
            return Err(Error::Config(format!("examples[{i}]: step {} outside 0..{}", ex.t, mc.diffusion_steps)));
        }
        inputs.extend_from_slice(ex.x_t.as_slice());
        targets.extend_from_slice(ex.x0.as_slice());
        embeddings.extend(time_embed(ex.t, mc.diffusion_steps, mc.embed_dim)?);
    }
    let rows = examples.len();
    let batch = Batch {
        inputs: Tensor::matrix(rows, width, inputs).expect("sized"),
        embeddings: Tensor::matrix(rows, mc.embed_dim, embeddings).expect("sized"),
        targets: Tensor::matrix(rows, width, targets).expect("sized"),
    };
    let (loss, grads) = batch_loss(model, &batch, true)?;
    let mut grads = grads.into_iter();
    let layers = model
        .layers()
        .iter()
        .map(|_| Layer {
            weight: grads.next().expect("one per parameter"),
            bias: grads.next().expect("one per parameter"),
        })
        .collect();
    Ok((loss, layers))
}

/// Fits `model` to predict x₀ from `x_t` with SGD + momentum.
///
/// Up to a tenth of the series (at most 256) are held out to measure the loss
/// before and after training; with fewer than ten series the held-out batch
/// reuses the training data with fresh noise.
pub fn train(
    mut model: Denoiser,
    data: &[Series],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mc = model.config().clone();
    for (i, s) in data.iter().enumerate() {
        s.ensure_shape(mc.len, mc.channels, &format!("series {i}"))?;
    }
    if sched.steps() != mc.diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the denoiser embeds {}",
            sched.steps(),
            mc.diffusion_steps
        )));
    }

    let holdout = if data.len() >= 10 { (data.len() / 10).min(256) } else { 0 };
    let (train_set, held) = data.split_at(data.len() - holdout);
    let held = if held.is_empty() { train_set } else { held };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eval_rng.set_stream(1);
    let eval_picks: Vec<usize> = (0..held.len().max(cfg.batch_size.min(256)))
        .map(|i| i % held.len())
        .collect();
    let eval_batch = draw_batch(held, &eval_picks, sched, mc.embed_dim, &mut eval_rng);
    let initial_loss = batch_loss(&model, &eval_batch, false)?.0;

    let mut velocity: Vec<Tensor> = model
        .layers()
        .iter()
        .flat_map(|l| [Tensor::zeros(l.weight.shape()), Tensor::zeros(l.bias.shape())])
        .collect();
    let mut recent = Vec::with_capacity(100);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = if train_set.len() >= cfg.batch_size {
            index::sample(&mut rng, train_set.len(), cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size)
                .map(|_| rng.random_range(0..train_set.len()))
                .collect()
        };
        let batch = draw_batch(train_set, &picks, sched, mc.embed_dim, &mut rng);
        let (loss, grads) = batch_loss(&model, &batch, true)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {loss} at step {step}"
            )));
        }
        if recent.len() == 100 {
            recent.remove(0);
        }
        recent.push(loss);
        let params = model
            .layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias]);
        for ((param, grad), vel) in params.zip(&grads).zip(&mut velocity) {
            for ((p, g), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
        }
    }
    let final_loss = batch_loss(&model, &eval_batch, false)?.0;
    if !final_loss.is_finite() {
        return Err(Error::Numeric(format!("held-out loss is {final_loss} after training")));
    }
    let final_train_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    Ok((
        model,
        TrainReport {
            initial_loss,
            final_loss,
            final_train_loss,
        },
    ))
}
