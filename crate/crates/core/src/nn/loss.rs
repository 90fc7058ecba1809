use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Added to the softplus scale so sigma never reaches zero.
pub const SIGMA_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, for initializing a raw parameter at a target scale.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianPrediction {
    /// Maps the two raw head outputs to a mean and a strictly positive scale.
    pub fn from_raw(raw_mean: f64, raw_scale: f64) -> Self {
        Self {
            mu: raw_mean,
            sigma: softplus(raw_scale) + SIGMA_FLOOR,
        }
    }
}

/// Gaussian negative log-likelihood of `target`.
pub fn nll_loss(pred: GaussianPrediction, target: f64) -> f64 {
    let z = (target - pred.mu) / pred.sigma;
    0.5 * (2.0 * PI).ln() + pred.sigma.ln() + 0.5 * z * z
}

/// NLL and its derivatives with respect to the two raw head outputs.
pub(crate) fn nll_with_head_grad(raw_mean: f64, raw_scale: f64, target: f64) -> (f64, f64, f64) {
    let pred = GaussianPrediction::from_raw(raw_mean, raw_scale);
    let r = target - pred.mu;
    let s2 = pred.sigma * pred.sigma;
    let d_mu = -r / s2;
    let d_sigma = 1.0 / pred.sigma - r * r / (s2 * pred.sigma);
    (nll_loss(pred, target), d_mu, d_sigma * sigmoid(raw_scale))
}
