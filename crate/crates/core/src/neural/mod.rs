//! Fully connected networks with exact reverse-mode gradients.
//!
//! Networks are `affine → ReLU → … → affine → output activation`. Forward
//! passes are batched (one sample per row); gradients are returned as
//! [`MlpGradients`] values rather than applied in place, so callers can
//! reduce them across workers before any update.

mod adam;
pub mod checkpoint;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{polyak_update, AdamConfig, AdamState};
pub use checkpoint::{deserialize_weights, serialize_weights};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer shapes of the two parameter sets differ")]
    ShapeMismatch,
    #[error("activation cache does not match these weights")]
    StaleCache,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Tanh => "tanh",
            OutputActivation::Identity => "identity",
        }
    }
}

/// Network shape. Hidden layers always use ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, output_activation: OutputActivation) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            output_activation,
        }
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.dims().contains(&0) {
            return Err(NeuralError::InvalidSpec(format!("zero-width layer in {:?}", self.dims())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Shared behaviour of parameter-shaped containers.
pub trait ParamSet {
    fn layers(&self) -> &[Layer];
    fn layers_mut(&mut self) -> &mut [Layer];

    /// Every parameter as a flat slice, layer by layer, weights before bias.
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn same_shape<P: ParamSet + ?Sized>(&self, other: &P) -> bool {
        self.layers().len() == other.layers().len()
            && self
                .layers()
                .iter()
                .zip(other.layers())
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Euclidean distance between two congruent parameter sets.
    fn distance<P: ParamSet + ?Sized>(&self, other: &P) -> f64 {
        self.param_slices()
            .iter()
            .zip(other.param_slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradient of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

impl ParamSet for Mlp {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl ParamSet for MlpGradients {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl MlpGradients {
    pub fn zeros_like<P: ParamSet + ?Sized>(p: &P) -> Self {
        Self {
            layers: p
                .layers()
                .iter()
                .map(|l| Layer::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) -> Result<(), NeuralError> {
        if !self.same_shape(other) {
            return Err(NeuralError::ShapeMismatch);
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

/// Largest double below one; keeps tanh outputs strictly inside (−1, 1)
/// where the hyperbolic tangent would round to ±1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Activations kept by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

impl Mlp {
    /// Random initialization: hidden layers uniform in `±1/√fan_in`, final
    /// layer uniform in `±3e-3`. Deterministic per seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, NeuralError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.dims();
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(li, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = if li + 1 == n_layers { 3e-3 } else { 1.0 / (fan_in as f64).sqrt() };
                let mut layer = Layer::zeros(fan_in, fan_out);
                layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
                layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// All-zero weights of the given shape.
    pub fn zeros(spec: MlpSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        let layers = spec.dims().windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { spec, layers })
    }

    pub(crate) fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self, NeuralError> {
        let net = Self { spec, layers };
        let shape = Self::zeros(net.spec.clone())?;
        if !net.same_shape(&shape) {
            return Err(NeuralError::ShapeMismatch);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Batched forward pass; `input` is `batch × input_dim`.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<ForwardCache, NeuralError> {
        if input.ncols() != self.spec.input_dim {
            return Err(NeuralError::DimensionMismatch {
                expected: self.spec.input_dim,
                got: input.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_activations = Vec::with_capacity(n_layers);
        let mut x = input.to_owned();
        for layer in &self.layers[..n_layers - 1] {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let a = z.mapv(|v| v.max(0.0));
            inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        let last = &self.layers[n_layers - 1];
        let mut z = x.dot(&last.weight.t());
        z += &last.bias;
        let output = match self.spec.output_activation {
            OutputActivation::Tanh => z.mapv(|v| v.tanh().clamp(-BELOW_ONE, BELOW_ONE)),
            OutputActivation::Identity => z.clone(),
        };
        inputs.push(x);
        pre_activations.push(z);
        Ok(ForwardCache {
            inputs,
            pre_activations,
            output,
        })
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NeuralError> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
        let cache = self.forward(view)?;
        Ok((cache.output.row(0).to_vec(), cache))
    }

    /// Output only, no cache retained beyond the call.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        Ok(self.forward(input)?.output)
    }

    /// Reverse-mode pass. `output_grad` is `∂L/∂output` (`batch × output_dim`).
    /// Returns parameter gradients (skipped when `param_grads` is false) and
    /// `∂L/∂input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        param_grads: bool,
    ) -> Result<(Option<MlpGradients>, Array2<f64>), NeuralError> {
        self.check_cache(cache)?;
        if output_grad.dim() != cache.output.dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: cache.output.ncols(),
                got: output_grad.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut delta = match self.spec.output_activation {
            OutputActivation::Tanh => {
                let mut d = output_grad.to_owned();
                Zip::from(&mut d).and(&cache.output).for_each(|g, &y| *g *= 1.0 - y * y);
                d
            }
            OutputActivation::Identity => output_grad.to_owned(),
        };
        let mut grads = param_grads.then(|| MlpGradients::zeros_like(self));
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            if let Some(g) = grads.as_mut() {
                general_mat_mul(1.0, &delta.t(), &cache.inputs[li], 0.0, &mut g.layers[li].weight);
                g.layers[li].bias = delta.sum_axis(Axis(0));
            }
            let mut prev = delta.dot(&layer.weight);
            if li > 0 {
                Zip::from(&mut prev)
                    .and(&cache.pre_activations[li - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<(), NeuralError> {
        let ok = cache.inputs.len() == self.layers.len()
            && cache
                .inputs
                .iter()
                .zip(&cache.pre_activations)
                .zip(&self.layers)
                .all(|((x, z), l)| x.ncols() == l.weight.ncols() && z.ncols() == l.weight.nrows());
        if ok {
            Ok(())
        } else {
            Err(NeuralError::StaleCache)
        }
    }
}
