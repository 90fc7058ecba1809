//! Concrete dropout: a dense layer whose input dropout rate is learned
//! through a continuous relaxation of the Bernoulli mask.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{DenseLayer, LayerCache, LayerNoise};
use crate::nn::loss::sigmoid;
use crate::nn::{Gradients, Layer, LossHook, Network};

const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteDropoutLayer {
    pub inner: DenseLayer,
    /// Dropout probability is `sigmoid(logit_p)`.
    pub logit_p: f64,
    pub temperature: f64,
}

/// Relaxed keep-mask entry for one uniform draw, and the drop sigmoid.
pub fn relaxed_mask(logit_p: f64, u: f64, temperature: f64) -> (f64, f64) {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    let z = (logit_p + u.ln() - (1.0 - u).ln()) / temperature;
    let drop = sigmoid(z);
    (1.0 - drop, drop)
}

impl ConcreteDropoutLayer {
    pub fn new(inner: DenseLayer, initial_p: f64, temperature: f64) -> Self {
        Self {
            inner,
            logit_p: (initial_p / (1.0 - initial_p)).ln(),
            temperature,
        }
    }

    pub fn dropout_probability(&self) -> f64 {
        sigmoid(self.logit_p)
    }

    /// One relaxed keep-mask over `input_dim` units, each in (0, 1).
    pub fn concrete_mask<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> Array1<f64> {
        Array1::from_shape_simple_fn(input_dim, || {
            relaxed_mask(self.logit_p, rng.random(), self.temperature).0
        })
    }

    pub(crate) fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> LayerNoise {
        LayerNoise::Concrete {
            uniform: Array2::from_shape_simple_fn((batch, self.inner.input_dim()), || rng.random()),
        }
    }

    pub(crate) fn forward(&self, x: Array2<f64>, noise: &LayerNoise) -> (Array2<f64>, LayerCache) {
        let (mask, drop_sig, dropped) = match noise {
            LayerNoise::Concrete { uniform } => {
                let keep_scale = 1.0 / (1.0 - self.dropout_probability());
                let mut mask = Array2::zeros(uniform.raw_dim());
                let mut drop_sig = Array2::zeros(uniform.raw_dim());
                ndarray::Zip::from(&mut mask)
                    .and(&mut drop_sig)
                    .and(uniform)
                    .for_each(|m, d, &u| {
                        let (keep, drop) = relaxed_mask(self.logit_p, u, self.temperature);
                        *m = keep;
                        *d = drop;
                    });
                let dropped = &x * &mask * keep_scale;
                (Some(mask), Some(drop_sig), dropped)
            }
            _ => (None, None, x.clone()),
        };
        let pre = self.inner.pre_activation(&dropped);
        let out = self.inner.activation.apply(&pre);
        (
            out,
            LayerCache::Concrete {
                input: x,
                mask,
                drop_sig,
                dropped,
                pre,
            },
        )
    }

    pub(crate) fn backward(&self, cache: &LayerCache, grad_out: &Array2<f64>) -> (Array2<f64>, Vec<Vec<f64>>) {
        let LayerCache::Concrete {
            input,
            mask,
            drop_sig,
            dropped,
            pre,
        } = cache
        else {
            unreachable!("concrete dropout cache expected")
        };
        let grad_z = self.inner.activation.backprop(pre, grad_out);
        let (grad_dropped, dw, db) = self.inner.backprop_linear(dropped, &grad_z);
        let (dx, dlogit) = match (mask, drop_sig) {
            (Some(mask), Some(drop_sig)) => {
                let p = self.dropout_probability();
                let keep_scale = 1.0 / (1.0 - p);
                let dx = &grad_dropped * mask * keep_scale;
                // d(dropped)/d(logit) = x·c·(dm/dlogit + m·p), dm/dlogit = −s(1−s)/t.
                let mut dlogit = 0.0;
                ndarray::Zip::from(&grad_dropped)
                    .and(input)
                    .and(mask)
                    .and(drop_sig)
                    .for_each(|&g, &x, &m, &s| {
                        let dm = -s * (1.0 - s) / self.temperature;
                        dlogit += g * x * keep_scale * (dm + m * p);
                    });
                (dx, dlogit)
            }
            _ => (grad_dropped, 0.0),
        };
        (
            dx,
            vec![dw.into_raw_vec_and_offset().0, db.to_vec(), vec![dlogit]],
        )
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        vec![
            self.inner.weights.as_slice().expect("standard layout"),
            self.inner.biases.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.logit_p),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.inner.weights.as_slice_mut().expect("standard layout"),
            self.inner.biases.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.logit_p),
        ]
    }
}

/// Weight and dropout-entropy regularizer for concrete dropout layers.
///
/// Per layer: `l²·‖W‖²/((1−p)·n) + (K/n)·d·(p·ln p + (1−p)·ln(1−p))`,
/// with `K` the layer input width and `n` the training-set size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdRegularizer {
    pub length_scale_sq: f64,
    pub dropout_scale: f64,
    pub n_train: usize,
}

impl CdRegularizer {
    fn layer_term(&self, layer: &ConcreteDropoutLayer) -> (f64, f64, f64) {
        let n = self.n_train as f64;
        let p = layer.dropout_probability();
        let k = layer.inner.input_dim() as f64;
        let w_sq: f64 = layer.inner.weights.iter().map(|w| w * w).sum();
        let weight_term = self.length_scale_sq * w_sq / ((1.0 - p) * n);
        let neg_entropy = xlogx(p) + xlogx(1.0 - p);
        let entropy_term = k / n * self.dropout_scale * neg_entropy;
        // d/dlogit: weight term gains p/(1−p); d(neg_entropy)/dlogit = logit·p(1−p).
        let dlogit = weight_term * p + k / n * self.dropout_scale * layer.logit_p * p * (1.0 - p);
        let dw_scale = 2.0 * self.length_scale_sq / ((1.0 - p) * n);
        (weight_term + entropy_term, dlogit, dw_scale)
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Regularizer value summed over every concrete dropout layer of `net`.
pub fn cd_regularizer(net: &Network, reg: &CdRegularizer) -> f64 {
    reg.penalty(net, None)
}

impl LossHook for CdRegularizer {
    fn penalty(&self, net: &Network, mut grads: Option<&mut Gradients>) -> f64 {
        let mut total = 0.0;
        for (i, layer) in net.layers.iter().enumerate() {
            let Layer::ConcreteDropout(l) = layer else {
                continue;
            };
            let (value, dlogit, dw_scale) = self.layer_term(l);
            total += value;
            if let Some(g) = grads.as_deref_mut() {
                let slot = g.layer_slice_mut(net, i);
                for (gw, w) in slot[0].iter_mut().zip(l.inner.weights.iter()) {
                    *gw += dw_scale * w;
                }
                slot[2][0] += dlogit;
            }
        }
        total
    }
}
