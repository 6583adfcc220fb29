//! The x₀-predicting network: a small tanh MLP over the flattened series and
//! a sinusoidal embedding of the diffusion step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_eval, Bindings, Graph, NodeId, Tensor};
use crate::{Error, Result, Series};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Sequence length `L`.
    pub len: usize,
    /// Channel count `D`.
    pub channels: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Width of the step embedding. Must be even.
    pub embed_dim: usize,
    /// Number of diffusion steps the embedding is normalized by.
    pub diffusion_steps: usize,
}

impl DenoiserConfig {
    pub fn new(len: usize, channels: usize, diffusion_steps: usize) -> Self {
        DenoiserConfig {
            len,
            channels,
            hidden: vec![128, 128],
            embed_dim: 32,
            diffusion_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.channels == 0 {
            return Err(Error::Config("series shape must be non-empty".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be a non-empty list of positive sizes".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be positive".into()));
        }
        Ok(())
    }

    /// Flattened series width `L·D`.
    pub fn series_width(&self) -> usize {
        self.len * self.channels
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.series_width() + self.embed_dim];
        widths.extend(&self.hidden);
        widths.push(self.series_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Sinusoidal embedding of step `t` out of `steps`, interleaving
/// `sin(t/steps · 10000^(-2i/dim))` and the matching cosine.
pub fn time_embed(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding width must be even, got {dim}")));
    }
    let phase = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out.push((phase * freq).sin());
        out.push((phase * freq).cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_in, fan_out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    layers: Vec<Layer>,
}

/// Node handles of a built network graph.
pub(crate) struct NetGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub embedding: NodeId,
    pub params: Vec<(NodeId, NodeId)>,
    pub output: NodeId,
}

impl Denoiser {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Denoiser { config, layers })
    }

    pub fn from_parts(config: DenoiserConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != [*fan_in, *fan_out] || layer.bias.shape() != [*fan_out] {
                return Err(Error::Config(format!(
                    "layer {i} has weight {:?} and bias {:?}, expected [{fan_in}, {fan_out}] and [{fan_out}]",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Denoiser { config, layers })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub(crate) fn build_graph(&self) -> NetGraph {
        let mut graph = Graph::new();
        let input = graph.leaf("x_t");
        let embedding = graph.leaf("step_embedding");
        let mut h = graph.concat(input, embedding);
        let mut params = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let w = graph.leaf(format!("w{i}"));
            let b = graph.leaf(format!("b{i}"));
            params.push((w, b));
            h = graph.matmul(h, w);
            h = graph.add_broadcast(h, b);
            if i + 1 < self.layers.len() {
                h = graph.tanh(h);
            }
        }
        NetGraph {
            graph,
            input,
            embedding,
            params,
            output: h,
        }
    }

    pub(crate) fn bind_params<'a>(&'a self, net: &NetGraph, bindings: &mut Bindings<'a>) {
        for ((w, b), layer) in net.params.iter().zip(&self.layers) {
            bindings.bind(*w, &layer.weight).bind(*b, &layer.bias);
        }
    }

    fn check_input(&self, x_t: &Series, t: usize) -> Result<()> {
        x_t.ensure_shape(self.config.len, self.config.channels, "denoiser input")?;
        if t >= self.config.diffusion_steps {
            return Err(Error::Config(format!(
                "step {t} outside 0..{}",
                self.config.diffusion_steps
            )));
        }
        Ok(())
    }

    fn embedding(&self, t: usize) -> Result<Tensor> {
        let e = time_embed(t, self.config.diffusion_steps, self.config.embed_dim)?;
        Ok(Tensor::matrix(1, self.config.embed_dim, e).expect("sized"))
    }

    /// Predicts the clean series from the noisy iterate at step `t`.
    pub fn predict_x0(&self, x_t: &Series, t: usize) -> Result<Series> {
        self.with_input_jacobian(x_t, t, |pass| Ok(pass.prediction().clone()))
    }

    /// Runs one forward pass and hands `body` access to the prediction and
    /// to vector-Jacobian products with respect to the input `x_t`.
    pub fn with_input_jacobian<T>(
        &self,
        x_t: &Series,
        t: usize,
        body: impl FnOnce(&InputJacobian<'_>) -> Result<T>,
    ) -> Result<T> {
        self.check_input(x_t, t)?;
        let net = self.build_graph();
        let input = Tensor::matrix(1, self.config.series_width(), x_t.as_slice().to_vec())
            .expect("sized");
        let emb = self.embedding(t)?;
        let mut bindings = Bindings::new();
        bindings.bind(net.input, &input).bind(net.embedding, &emb);
        self.bind_params(&net, &mut bindings);
        let eval = forward_eval(&net.graph, &bindings)?;
        let prediction = Series::from_vec(
            self.config.len,
            self.config.channels,
            eval.value(net.output).data().to_vec(),
        )?;
        let pass = InputJacobian {
            eval: &eval,
            net: &net,
            prediction,
        };
        body(&pass)
    }
}

/// A forward pass of the denoiser kept alive for input-gradient queries.
pub struct InputJacobian<'a> {
    eval: &'a crate::autodiff::Evaluation<'a>,
    net: &'a NetGraph,
    prediction: Series,
}

impl InputJacobian<'_> {
    /// The raw (unclamped) prediction of x₀.
    pub fn prediction(&self) -> &Series {
        &self.prediction
    }

    /// `Jᵀ·v` where `J = ∂x̂₀/∂x_t`.
    pub fn vjp(&self, cotangent: &Series) -> Result<Series> {
        cotangent.ensure_shape(self.prediction.len(), self.prediction.channels(), "cotangent")?;
        let seed = Tensor::matrix(1, cotangent.as_slice().len(), cotangent.as_slice().to_vec())
            .expect("sized");
        let mut grads = self
            .eval
            .backward(self.net.output, &[self.net.input], Some(&seed))?;
        let g = grads.remove(&self.net.input).expect("requested");
        Series::from_vec(
            self.prediction.len(),
            self.prediction.channels(),
            g.into_data(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Denoiser {
        let cfg = DenoiserConfig {
            len: 4,
            channels: 2,
            hidden: vec![6, 5],
            embed_dim: 4,
            diffusion_steps: 10,
        };
        Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn embedding_at_zero() {
        let e = time_embed(0, 200, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(e.iter().map(|v| v * v).sum::<f64>(), 4.0);
    }

    #[test]
    fn embedding_distinguishes_neighbouring_steps() {
        assert_ne!(time_embed(3, 200, 8).unwrap(), time_embed(4, 200, 8).unwrap());
        assert!(time_embed(1, 10, 3).is_err());
    }

    #[test]
    fn parameter_count_is_stable() {
        let cfg = DenoiserConfig::new(24, 5, 200);
        // (120+32)·128+128 + 128·128+128 + 128·120+120
        assert_eq!(cfg.parameter_count(), 19584 + 16512 + 15480);
        let model = Denoiser::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.parameter_count(), cfg.parameter_count());
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let model = small();
        let x = Series::from_vec(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = model.predict_x0(&x, 3).unwrap();
        let b = model.predict_x0(&x, 3).unwrap();
        assert_eq!(a.shape(), (4, 2));
        assert_eq!(a, b);
        assert!(model.predict_x0(&Series::zeros(3, 2), 0).is_err());
        assert!(model.predict_x0(&x, 10).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = small();
        let x = Series::from_vec(4, 2, (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let ones = Series::filled(4, 2, 1.0);
        let analytic = model
            .with_input_jacobian(&x, 5, |pass| pass.vjp(&ones))
            .unwrap();
        let f = |s: &Series| model.predict_x0(s, 5).unwrap().as_slice().iter().sum::<f64>();
        let eps = 1e-5;
        for i in 0..8 {
            let mut p = x.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= eps;
            let numeric = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            assert!((a - numeric).abs() / a.abs().max(1.0) < 1e-4, "component {i}");
        }
    }

    #[test]
    fn rejects_bad_layer_shapes() {
        let model = small();
        let mut layers = model.layers().to_vec();
        layers.pop();
        assert!(Denoiser::from_parts(model.config().clone(), layers).is_err());
    }
}
