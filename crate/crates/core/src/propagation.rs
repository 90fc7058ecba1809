//! Reference uncertainty on g from first-order error propagation.
//!
//! With `g = 4π²L/T̄²` the relative uncertainties add in quadrature:
//! `(σ_g/g)² = (σ_L/L)² + (2·σ_T̄/T̄)²`, where `σ_T̄ = s/√n` is the standard
//! error of the mean period. A Monte-Carlo resampler is provided to check the
//! linearization.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pendulum::PendulumSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticUncertainty {
    pub g_estimate: f64,
    pub sigma_abs: f64,
    pub sigma_rel: f64,
    /// Relative contribution of the length reading.
    pub comp_length: f64,
    /// Relative contribution of the mean period.
    pub comp_period: f64,
}

/// Mean and sample standard deviation (n − 1 denominator).
fn mean_and_sample_stdev(xs: &[f64]) -> (f64, f64) {
    // Shifted by the first reading: identical readings give exactly s = 0.
    let n = xs.len() as f64;
    let origin = xs[0];
    let mean_dev = xs.iter().map(|x| x - origin).sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - origin - mean_dev).powi(2)).sum();
    (origin + mean_dev, (ss / (n - 1.0)).sqrt())
}

fn check_periods(sample: &PendulumSample) -> Result<()> {
    let periods = &sample.period_measurements;
    if periods.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 period measurements, got {}",
            periods.len()
        )));
    }
    if periods.iter().any(|&t| !(t > 0.0)) || !(sample.length_measured > 0.0) {
        return Err(Error::Domain("measurements must be positive".into()));
    }
    Ok(())
}

pub fn propagate(sample: &PendulumSample, length_noise_assumed: f64) -> Result<AnalyticUncertainty> {
    check_periods(sample)?;
    let n = sample.period_measurements.len() as f64;
    let (t_mean, s) = mean_and_sample_stdev(&sample.period_measurements);
    let comp_period = 2.0 * (s / n.sqrt()) / t_mean;
    let comp_length = length_noise_assumed;
    let g_estimate = 4.0 * PI * PI * sample.length_measured / (t_mean * t_mean);
    let sigma_rel = comp_length.hypot(comp_period);
    Ok(AnalyticUncertainty {
        g_estimate,
        sigma_abs: sigma_rel * g_estimate,
        sigma_rel,
        comp_length,
        comp_period,
    })
}

/// Relative spread of g under resampled L and T̄; the independent check on [`propagate`].
pub fn monte_carlo_propagate<R: Rng + ?Sized>(
    sample: &PendulumSample,
    length_noise_assumed: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    check_periods(sample)?;
    if n_draws < 10_000 {
        return Err(Error::InvalidConfig(format!(
            "monte_carlo_propagate needs at least 10^4 draws, got {n_draws}"
        )));
    }
    let n = sample.period_measurements.len() as f64;
    let (t_mean, s) = mean_and_sample_stdev(&sample.period_measurements);
    let sem = s / n.sqrt();
    let l = sample.length_measured;
    let sd_l = length_noise_assumed * l;
    // Welford accumulation keeps the variance stable at 10^6 draws.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for k in 0..n_draws {
        let zl: f64 = rng.sample(StandardNormal);
        let zt: f64 = rng.sample(StandardNormal);
        let li = l + sd_l * zl;
        let ti = t_mean + sem * zt;
        let g = 4.0 * PI * PI * li / (ti * ti);
        let delta = g - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (g - mean);
    }
    let stdev = (m2 / (n_draws - 1) as f64).sqrt();
    Ok(stdev / mean)
}
