//! Small fully connected encoder from utterance features to embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{normalize, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_embedding_dim() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: default_hidden(),
            embedding_dim: default_embedding_dim(),
            activation: Activation::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if self.hidden_dims.iter().any(|&d| d < 1) {
            return Err(Error::config(
                "hidden_dims",
                "every layer width must be >= 1",
            ));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding_dim", "must be >= 2"));
        }
        Ok(())
    }
}

/// Dense layer, `weights` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// Per-layer activations kept for the backward pass.
pub struct Trace {
    /// `activations[0]` is the input, the last entry the raw embedding.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an input")
    }
}

impl Encoder {
    /// He-initialized weights, zero biases.
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.embedding_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::he(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            activation: cfg.activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Forward pass keeping intermediates. The output is not normalized.
    pub fn forward(&self, features: &[f64]) -> Result<Trace> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(activations.last().unwrap());
            if i < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            activations.push(out);
        }
        Ok(Trace { activations })
    }

    /// Unit-norm embedding of one utterance.
    pub fn encode(&self, features: &[f64]) -> Result<EmbeddingVector> {
        normalize(self.forward(features)?.output())
    }

    /// Accumulate parameter gradients for one example into `grads`, given
    /// the gradient with respect to the raw output.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grads: &mut EncoderGrads) {
        let mut delta = grad_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if i == 0 {
                break;
            }
            let mut next = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
            }
            for (n, y) in next.iter_mut().zip(input) {
                *n *= self.activation.derivative_from_output(*y);
            }
            delta = next;
        }
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// All parameters in a fixed order: per layer, weights then bias.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }
}

/// Gradients shaped like the encoder.
pub struct EncoderGrads {
    pub layers: Vec<Dense>,
}

impl EncoderGrads {
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}
