//! Mean-field Gaussian dense layer sampled with the flipout estimator.
//!
//! One Gaussian weight perturbation `ΔW = σ ∘ ε` is drawn per batch; each
//! example then sees it with its own random sign pattern,
//! `((x ∘ r) ΔWᵀ) ∘ s`, which decorrelates the perturbations across the batch
//! while keeping the per-example marginal identical to independent weight
//! sampling.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{Activation, LayerCache, LayerNoise};
use crate::nn::loss::{sigmoid, softplus, softplus_inverse};
use crate::nn::{Gradients, Layer, LossHook, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipoutLayer {
    /// Posterior means, `out × in`.
    pub weight_mean: Array2<f64>,
    /// Posterior stdev is `softplus(weight_rho)`.
    pub weight_rho: Array2<f64>,
    pub bias_mean: Array1<f64>,
    pub bias_rho: Array1<f64>,
    pub activation: Activation,
}

fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

impl FlipoutLayer {
    /// He-initialized means and a uniform initial posterior stdev.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        initial_stdev: f64,
        rng: &mut R,
    ) -> Self {
        let scale = (2.0 / input_dim as f64).sqrt();
        let rho = softplus_inverse(initial_stdev);
        Self {
            weight_mean: Array2::from_shape_simple_fn((output_dim, input_dim), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            weight_rho: Array2::from_elem((output_dim, input_dim), rho),
            bias_mean: Array1::zeros(output_dim),
            bias_rho: Array1::from_elem(output_dim, rho),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight_mean.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight_mean.nrows()
    }

    pub fn weight_stdev(&self) -> Array2<f64> {
        self.weight_rho.mapv(softplus)
    }

    pub fn bias_stdev(&self) -> Array1<f64> {
        self.bias_rho.mapv(softplus)
    }

    pub(crate) fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> LayerNoise {
        let (out, inp) = (self.output_dim(), self.input_dim());
        LayerNoise::Flipout {
            eps_weights: Array2::from_shape_simple_fn((out, inp), || rng.sample(StandardNormal)),
            eps_bias: Array2::from_shape_simple_fn((batch, out), || rng.sample(StandardNormal)),
            sign_in: Array2::from_shape_simple_fn((batch, inp), || rademacher(rng)),
            sign_out: Array2::from_shape_simple_fn((batch, out), || rademacher(rng)),
        }
    }

    fn pre_activation(&self, x: &Array2<f64>, noise: &LayerNoise) -> (Array2<f64>, Option<Array2<f64>>) {
        let mut z = x.dot(&self.weight_mean.t());
        z += &self.bias_mean;
        match noise {
            LayerNoise::Flipout {
                eps_weights,
                eps_bias,
                sign_in,
                sign_out,
            } => {
                let delta = self.weight_stdev() * eps_weights;
                let signed = x * sign_in;
                z += &(signed.dot(&delta.t()) * sign_out);
                z += &(eps_bias * &self.bias_stdev());
                (z, Some(signed))
            }
            _ => (z, None),
        }
    }

    /// Stochastic pre-activation output for a batch.
    pub fn flipout_forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, rng: &mut R) -> Array2<f64> {
        let noise = self.sample_noise(x.nrows(), rng);
        self.pre_activation(x, &noise).0
    }

    pub(crate) fn forward(&self, x: Array2<f64>, noise: &LayerNoise) -> (Array2<f64>, LayerCache) {
        let (pre, signed_input) = self.pre_activation(&x, noise);
        let out = self.activation.apply(&pre);
        (
            out,
            LayerCache::Flipout {
                input: x,
                signed_input,
                pre,
            },
        )
    }

    pub(crate) fn backward(
        &self,
        cache: &LayerCache,
        noise: &LayerNoise,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Vec<Vec<f64>>) {
        let LayerCache::Flipout {
            input,
            signed_input,
            pre,
        } = cache
        else {
            unreachable!("flipout cache expected")
        };
        let grad_z = self.activation.backprop(pre, grad_out);
        let d_wmean = grad_z.t().dot(input);
        let d_bmean = grad_z.sum_axis(Axis(0));
        let mut dx = grad_z.dot(&self.weight_mean);
        let (d_wrho, d_brho) = match (noise, signed_input) {
            (
                LayerNoise::Flipout {
                    eps_weights,
                    eps_bias,
                    sign_in,
                    sign_out,
                },
                Some(signed),
            ) => {
                let delta = self.weight_stdev() * eps_weights;
                let grad_signed = &grad_z * sign_out;
                let d_delta = grad_signed.t().dot(signed);
                let d_wrho = d_delta * eps_weights * &self.weight_rho.mapv(sigmoid);
                dx += &(grad_signed.dot(&delta) * sign_in);
                let d_brho = (&grad_z * eps_bias).sum_axis(Axis(0)) * self.bias_rho.mapv(sigmoid);
                (d_wrho, d_brho)
            }
            _ => (
                Array2::zeros(self.weight_rho.raw_dim()),
                Array1::zeros(self.bias_rho.len()),
            ),
        };
        (
            dx,
            vec![
                d_wmean.into_raw_vec_and_offset().0,
                d_wrho.into_raw_vec_and_offset().0,
                d_bmean.to_vec(),
                d_brho.to_vec(),
            ],
        )
    }

    pub(crate) fn params(&self) -> Vec<&[f64]> {
        vec![
            self.weight_mean.as_slice().expect("standard layout"),
            self.weight_rho.as_slice().expect("standard layout"),
            self.bias_mean.as_slice().expect("standard layout"),
            self.bias_rho.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight_mean.as_slice_mut().expect("standard layout"),
            self.weight_rho.as_slice_mut().expect("standard layout"),
            self.bias_mean.as_slice_mut().expect("standard layout"),
            self.bias_rho.as_slice_mut().expect("standard layout"),
        ]
    }

    /// KL divergence of the weight and bias posteriors from N(0, 1).
    pub fn kl(&self) -> f64 {
        kl_diag_gaussian(self.weight_mean.iter().copied(), self.weight_stdev().iter().copied())
            + kl_diag_gaussian(self.bias_mean.iter().copied(), self.bias_stdev().iter().copied())
    }
}

/// `Σ ln(1/σ) + (σ² + μ² − 1)/2`: KL from `N(μ, σ²)` factors to a standard normal.
pub fn kl_diag_gaussian(
    means: impl IntoIterator<Item = f64>,
    stdevs: impl IntoIterator<Item = f64>,
) -> f64 {
    means
        .into_iter()
        .zip(stdevs)
        .map(|(m, s)| -s.ln() + 0.5 * (s * s + m * m - 1.0))
        .sum()
}

fn add_kl_grad<'a>(
    grad_mean: &mut [f64],
    grad_rho: &mut [f64],
    means: impl Iterator<Item = &'a f64>,
    rhos: impl Iterator<Item = &'a f64>,
    scale: f64,
) {
    for (gm, m) in grad_mean.iter_mut().zip(means) {
        *gm += scale * m;
    }
    // dKL/dσ = σ − 1/σ, dσ/dρ = sigmoid(ρ).
    for (gr, &r) in grad_rho.iter_mut().zip(rhos) {
        let s = softplus(r);
        *gr += scale * (s - 1.0 / s) * sigmoid(r);
    }
}

/// KL of every flipout layer, scaled by `1/n_train`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPenalty {
    pub n_train: usize,
}

impl LossHook for KlPenalty {
    fn penalty(&self, net: &Network, mut grads: Option<&mut Gradients>) -> f64 {
        let scale = 1.0 / self.n_train as f64;
        let mut total = 0.0;
        for (i, layer) in net.layers.iter().enumerate() {
            let Layer::Flipout(l) = layer else { continue };
            total += l.kl();
            if let Some(g) = grads.as_deref_mut() {
                let slot = g.layer_slice_mut(net, i);
                let (weights, biases) = slot.split_at_mut(2);
                let (gw_mean, gw_rho) = weights.split_at_mut(1);
                let (gb_mean, gb_rho) = biases.split_at_mut(1);
                add_kl_grad(&mut gw_mean[0], &mut gw_rho[0], l.weight_mean.iter(), l.weight_rho.iter(), scale);
                add_kl_grad(&mut gb_mean[0], &mut gb_rho[0], l.bias_mean.iter(), l.bias_rho.iter(), scale);
            }
        }
        total * scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::sample_rng;
    use approx::assert_relative_eq;

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_diag_gaussian([0.0], [1.0]), 0.0);
        assert_relative_eq!(kl_diag_gaussian([1.0], [1.0]), 0.5);
        let s: f64 = 1e-3;
        let kl = kl_diag_gaussian([0.3], [s]);
        assert!(kl.is_finite());
        assert!((kl - (-s.ln())).abs() < 0.5);
    }

    #[test]
    fn zero_stdev_reduces_to_mean_weights() {
        let mut rng = sample_rng(200, 0);
        let mut layer = FlipoutLayer::new(4, 3, Activation::Identity, 1e-3, &mut rng);
        layer.weight_rho.fill(-800.0);
        layer.bias_rho.fill(-800.0);
        layer.bias_mean = Array1::from(vec![0.1, -0.2, 0.3]);
        let x = Array2::from_shape_simple_fn((5, 4), || rng.sample::<f64, _>(StandardNormal));
        let stochastic = layer.flipout_forward(&x, &mut rng);
        let mut det = x.dot(&layer.weight_mean.t());
        det += &layer.bias_mean;
        for (a, b) in stochastic.iter().zip(det.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
