//! Dense feed-forward Q-network.
//!
//! Layers use the row-vector convention `z = [f_prev, 1] · W`, so a layer
//! with `in_dim` inputs and `out_dim` neurons stores a weight matrix of shape
//! `(in_dim + 1) x out_dim` when the bias feature is enabled. The trailing
//! row holds the bias; the error-driven calculus in [`edl`] treats it like
//! any other weight.

mod checkpoint;
pub mod edl;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use edl::{
    apply_update, build_feedback_matrix, compute_transform, edl_feedback, gradient_feedback,
    layer_cost, regularized_empirical_cost, regularizer, signed_lambda, total_cost, Preconditioner, TdError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer index {index} out of range for a {depth}-layer network")]
    LayerOutOfRange { index: usize, depth: usize },
    #[error("network needs at least one layer")]
    NoLayers,
    #[error("layer {layer}: update produced a non-finite weight")]
    NonFiniteUpdate { layer: usize },
    #[error("{0} per-layer values supplied for a {1}-layer network")]
    PerLayerCount(usize, usize),
    #[error("td error action {action} out of range for {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Identity,
    Relu,
    Tanh,
}

impl ActivationKind {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative; the Relu kink at exactly 0 maps to 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Identity => 0,
            Self::Relu => 1,
            Self::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Identity),
            1 => Some(Self::Relu),
            2 => Some(Self::Tanh),
            _ => None,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: ActivationKind) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Chains `input -> hidden... -> outputs`: hidden layers use `hidden_act`, the head is linear.
pub fn mlp_specs(input: usize, hidden: &[usize], outputs: usize, hidden_act: ActivationKind) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(outputs);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() {
                ActivationKind::Identity
            } else {
                hidden_act
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    bias: bool,
}

impl NetworkParams {
    /// Assembles parameters from explicit layers, validating chaining and weight shapes.
    pub fn from_layers(layers: Vec<Layer>, bias: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(NetworkError::NoLayers);
        }
        let extra = usize::from(bias);
        for (i, layer) in layers.iter().enumerate() {
            let s = layer.spec;
            if i > 0 && layers[i - 1].spec.out_dim != s.in_dim {
                return Err(NetworkError::ShapeMismatch {
                    layer: i,
                    expected: layers[i - 1].spec.out_dim,
                    got: s.in_dim,
                });
            }
            if layer.weights.shape() != (s.in_dim + extra, s.out_dim) {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_layers",
                    left: (s.in_dim + extra, s.out_dim),
                    right: layer.weights.shape(),
                }
                .into());
            }
        }
        Ok(Self { layers, bias })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn weights(&self, layer: usize) -> &Matrix {
        &self.layers[layer].weights
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len()).sum()
    }

    /// Replaces one layer's weights, keeping its shape.
    pub fn with_weights(&self, layer: usize, weights: Matrix) -> Result<Self> {
        self.check_layer(layer)?;
        let mut layers = self.layers.clone();
        layers[layer].weights = weights;
        Self::from_layers(layers, self.bias)
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.depth() {
            return Err(NetworkError::LayerOutOfRange {
                index: layer,
                depth: self.depth(),
            });
        }
        Ok(())
    }

    /// Euclidean distance between two parameter vectors of identical architecture.
    pub fn distance(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.weights.data().iter().zip(b.weights.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Glorot-uniform initialisation, deterministic in `seed`.
pub fn init_network(specs: &[LayerSpec], seed: u64, bias: bool) -> Result<NetworkParams> {
    if specs.is_empty() {
        return Err(NetworkError::NoLayers);
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(NetworkError::ShapeMismatch {
                layer: i + 1,
                expected: w[0].out_dim,
                got: w[1].in_dim,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = usize::from(bias);
    let layers = specs
        .iter()
        .map(|&spec| {
            let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let rows = spec.in_dim + extra;
            let data = (0..rows * spec.out_dim)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            Ok(Layer {
                spec,
                weights: Matrix::new(rows, spec.out_dim, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkParams::from_layers(layers, bias)
}

/// Activations captured during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `inputs[i]` is the vector multiplied into layer `i`: `f⁽ⁱ⁻¹⁾` with the
    /// bias feature appended when enabled. `inputs[0]` starts with `x`.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }

    pub fn depth(&self) -> usize {
        self.pre.len()
    }
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(NetworkError::ShapeMismatch {
            layer: 0,
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let depth = params.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for (i, layer) in params.layers.iter().enumerate() {
        let mut input = if i == 0 { x.to_vec() } else { post[i - 1].clone() };
        if params.bias {
            input.push(1.0);
        }
        let z = layer.weights.left_mul_vec(&input)?;
        let f = z.iter().map(|&v| layer.spec.activation.value(v)).collect();
        inputs.push(input);
        pre.push(z);
        post.push(f);
    }
    Ok(ForwardTrace { inputs, pre, post })
}

/// Output vector only.
pub fn predict(params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut trace = forward(params, x)?;
    Ok(trace.post.pop().expect("non-empty"))
}
