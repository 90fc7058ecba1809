use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::uq::dropout::ConcreteDropoutLayer;
use crate::uq::flipout::FlipoutLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Chains the upstream gradient through the activation; ReLU'(0) = 0.
    pub(crate) fn backprop(self, z: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut g = grad_out.clone();
                g.zip_mut_with(z, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Identity => grad_out.clone(),
        }
    }
}

/// Fully connected layer, `weights` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((output_dim, input_dim)),
            biases: Array1::zeros(output_dim),
            activation,
        }
    }

    /// Gaussian weights with stdev `sqrt(2 / fan_in)`, zero biases.
    pub fn he_init<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let scale = (2.0 / input_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((output_dim, input_dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            weights,
            biases: Array1::zeros(output_dim),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn pre_activation(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.biases;
        z
    }

    /// Gradients of weights/biases and of the (pre-activation) input, given dL/dz.
    pub(crate) fn backprop_linear(
        &self,
        x: &Array2<f64>,
        grad_z: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dw = grad_z.t().dot(x);
        let db = grad_z.sum_axis(Axis(0));
        let dx = grad_z.dot(&self.weights);
        (dx, dw, db)
    }
}

/// Pre-drawn randomness for one layer and one batch.
///
/// Keeping the draws outside the forward pass lets the same stochastic network
/// be evaluated repeatedly (gradient checks, loss decomposition).
#[derive(Debug, Clone)]
pub enum LayerNoise {
    /// Deterministic pass: no dropout, mean weights.
    None,
    Concrete {
        /// `batch × in` uniforms in (0, 1).
        uniform: Array2<f64>,
    },
    Flipout {
        /// `out × in` standard normals shared by the batch.
        eps_weights: Array2<f64>,
        /// `batch × out` standard normals.
        eps_bias: Array2<f64>,
        /// `batch × in` Rademacher signs.
        sign_in: Array2<f64>,
        /// `batch × out` Rademacher signs.
        sign_out: Array2<f64>,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Dense {
        input: Array2<f64>,
        pre: Array2<f64>,
    },
    Concrete {
        input: Array2<f64>,
        /// Relaxed keep-mask.
        mask: Option<Array2<f64>>,
        /// sigmoid of the drop logit; needed for d mask / d logit_p.
        drop_sig: Option<Array2<f64>>,
        dropped: Array2<f64>,
        pre: Array2<f64>,
    },
    Flipout {
        input: Array2<f64>,
        signed_input: Option<Array2<f64>>,
        pre: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    ConcreteDropout(ConcreteDropoutLayer),
    Flipout(FlipoutLayer),
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.input_dim(),
            Layer::ConcreteDropout(l) => l.inner.input_dim(),
            Layer::Flipout(l) => l.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.output_dim(),
            Layer::ConcreteDropout(l) => l.inner.output_dim(),
            Layer::Flipout(l) => l.output_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::ConcreteDropout(_) => "concrete_dropout",
            Layer::Flipout(_) => "flipout",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        !matches!(self, Layer::Dense(_))
    }

    pub(crate) fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> LayerNoise {
        match self {
            Layer::Dense(_) => LayerNoise::None,
            Layer::ConcreteDropout(l) => l.sample_noise(batch, rng),
            Layer::Flipout(l) => l.sample_noise(batch, rng),
        }
    }

    /// Post-activation output and the cache needed by [`Layer::backward`].
    pub(crate) fn forward(&self, x: Array2<f64>, noise: &LayerNoise) -> (Array2<f64>, LayerCache) {
        match self {
            Layer::Dense(l) => {
                let pre = l.pre_activation(&x);
                (l.activation.apply(&pre), LayerCache::Dense { input: x, pre })
            }
            Layer::ConcreteDropout(l) => l.forward(x, noise),
            Layer::Flipout(l) => l.forward(x, noise),
        }
    }

    /// Returns dL/d(input) and the flat gradient of every parameter tensor.
    pub(crate) fn backward(
        &self,
        cache: &LayerCache,
        noise: &LayerNoise,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Vec<f64>>) {
        match (self, cache) {
            (Layer::Dense(l), LayerCache::Dense { input, pre }) => {
                let grad_z = l.activation.backprop(pre, grad_out);
                let (dx, dw, db) = l.backprop_linear(input, &grad_z);
                (dx, vec![dw.into_raw_vec_and_offset().0, db.to_vec()])
            }
            (Layer::ConcreteDropout(l), c) => l.backward(c, grad_out),
            (Layer::Flipout(l), c) => l.backward(c, noise, grad_out),
            _ => unreachable!("cache does not match layer kind"),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(l) => vec![
                l.weights.as_slice().expect("standard layout"),
                l.biases.as_slice().expect("standard layout"),
            ],
            Layer::ConcreteDropout(l) => l.params(),
            Layer::Flipout(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense(l) => vec![
                l.weights.as_slice_mut().expect("standard layout"),
                l.biases.as_slice_mut().expect("standard layout"),
            ],
            Layer::ConcreteDropout(l) => l.params_mut(),
            Layer::Flipout(l) => l.params_mut(),
        }
    }
}
