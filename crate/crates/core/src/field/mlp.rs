//! Fully connected networks. Rows are samples; `y = act(x·W + b)`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`.
    pub weight: Array2<f64>,
    /// `1 × out`.
    pub bias: Array2<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Layer sizes and activations of an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Zero the final layer so the network starts as a constant.
    pub zero_output: bool,
}

impl MlpParams {
    /// He-normal hidden layers; the output layer uses `1/fan_in` variance
    /// unless zeroed.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![spec.input];
        sizes.extend(&spec.hidden);
        sizes.push(spec.output);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let last = l + 1 == n;
                let std = if last { (1.0 / fan_in as f64).sqrt() } else { (2.0 / fan_in as f64).sqrt() };
                let normal = Normal::new(0.0, std).expect("finite std");
                let weight = if last && spec.zero_output {
                    Array2::zeros((fan_in, fan_out))
                } else {
                    Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng))
                };
                Layer {
                    weight,
                    bias: Array2::zeros((1, fan_out)),
                    activation: if last { spec.output_activation } else { spec.hidden_activation },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("MLP has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bias.shape() != [1, layer.weight.ncols()] {
                return Err(Error::Dimension(format!("layer {l}: bias shape {:?}", layer.bias.shape())));
            }
            if l > 0 && self.layers[l - 1].weight.ncols() != layer.weight.nrows() {
                return Err(Error::Dimension(format!("layer {l}: input does not chain from previous output")));
            }
        }
        Ok(())
    }

    /// Reference evaluation outside the tape.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = h.dot(&layer.weight) + &layer.bias;
            h.mapv_inplace(|v| layer.activation.apply(v));
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(zero: bool) -> MlpSpec {
        MlpSpec {
            input: 5,
            hidden: vec![7, 6],
            output: 3,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            zero_output: zero,
        }
    }

    #[test]
    fn layer_dimensions_chain() {
        let m = MlpParams::init(&spec(false), &mut ChaCha8Rng::seed_from_u64(0));
        m.validate().unwrap();
        assert_eq!((m.input_dim(), m.output_dim()), (5, 3));
        let mut broken = m.clone();
        broken.layers[1].weight = Array2::zeros((4, 6));
        assert!(broken.validate().is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let m = MlpParams::init(&spec(true), &mut ChaCha8Rng::seed_from_u64(1));
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.1 - 1.0);
        assert!(m.forward(x.view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_hand_computation() {
        let m = MlpParams {
            layers: vec![
                Layer { weight: array![[1.0, -1.0], [0.5, 2.0]], bias: array![[0.0, 0.1]], activation: Activation::Relu },
                Layer { weight: array![[2.0], [1.0]], bias: array![[-0.5]], activation: Activation::Identity },
            ],
        };
        // x = (1, 1): hidden = relu(1.5, 1.1) -> 2*1.5 + 1.1 - 0.5 = 3.6
        let y = m.forward(array![[1.0, 1.0]].view());
        assert!((y[[0, 0]] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn same_inputs_give_bit_identical_outputs() {
        let m = MlpParams::init(&spec(false), &mut ChaCha8Rng::seed_from_u64(2));
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) as f64).sin());
        assert_eq!(m.forward(x.view()), m.forward(x.view()));
    }
}
