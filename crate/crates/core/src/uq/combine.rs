use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GaussianPrediction;

/// Equal-weight Gaussian mixture of N stochastic predictions, reduced to
/// its first two moments and split into aleatoric and epistemic parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub g_hat: f64,
    pub sigma_al: f64,
    pub sigma_ep: f64,
    pub sigma_pr: f64,
    pub n_components: usize,
}

/// `ĝ = mean μ`, `σ_al = √mean σ²`, `σ_ep = √(mean μ² − ĝ²)`, `σ_pr = √(σ_al² + σ_ep²)`.
pub fn combine(predictions: &[GaussianPrediction]) -> Result<PredictiveSummary> {
    let n = predictions.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "combining needs at least 2 predictions, got {n}"
        )));
    }
    if let Some(p) = predictions.iter().find(|p| !(p.sigma > 0.0)) {
        return Err(Error::Domain(format!("non-positive sigma {}", p.sigma)));
    }
    let nf = n as f64;
    // Moments of μ are taken about the first component, so equal means give
    // exactly zero spread.
    let origin = predictions[0].mu;
    let mean_dev = predictions.iter().map(|p| p.mu - origin).sum::<f64>() / nf;
    let mean_sq_dev = predictions.iter().map(|p| (p.mu - origin).powi(2)).sum::<f64>() / nf;
    let g_hat = origin + mean_dev;
    let ep_var = (mean_sq_dev - mean_dev * mean_dev).max(0.0);
    let mean_var = predictions.iter().map(|p| p.sigma * p.sigma).sum::<f64>() / nf;
    let sigma_al = mean_var.sqrt();
    let sigma_ep = ep_var.sqrt();
    Ok(PredictiveSummary {
        g_hat,
        sigma_al,
        sigma_ep,
        sigma_pr: (mean_var + ep_var).sqrt(),
        n_components: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::sample_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn gp(mu: f64, sigma: f64) -> GaussianPrediction {
        GaussianPrediction { mu, sigma }
    }

    #[test]
    fn two_component_example() {
        let s = combine(&[gp(1.0, 1.0), gp(3.0, 1.0)]).unwrap();
        assert_eq!(s.g_hat, 2.0);
        assert_eq!(s.sigma_al, 1.0);
        assert_eq!(s.sigma_ep, 1.0);
        assert_relative_eq!(s.sigma_pr, 2f64.sqrt(), max_relative = 1e-15);
        assert_eq!(s.n_components, 2);
    }

    #[test]
    fn equal_means_have_no_epistemic_part() {
        let s = combine(&[gp(9.7, 0.2), gp(9.7, 0.4), gp(9.7, 0.3)]).unwrap();
        assert_eq!(s.sigma_ep, 0.0);
        assert_eq!(s.sigma_pr, s.sigma_al);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(combine(&[gp(1.0, 1.0)]).is_err());
        assert!(combine(&[]).is_err());
        assert!(combine(&[gp(1.0, 1.0), gp(1.0, 0.0)]).is_err());
    }

    /// Mixture moments by brute force: E[X] and E[X²] summed component by component.
    fn brute_force_moments(p: &[GaussianPrediction]) -> (f64, f64) {
        let w = 1.0 / p.len() as f64;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in p {
            m1 += w * c.mu;
            m2 += w * (c.sigma * c.sigma + c.mu * c.mu);
        }
        (m1, m2 - m1 * m1)
    }

    #[test]
    fn matches_mixture_moments() {
        let mut rng = sample_rng(300, 0);
        for _ in 0..200 {
            let preds: Vec<_> = (0..10)
                .map(|_| gp(rng.random_range(5.0..15.0), rng.random_range(0.01..2.0)))
                .collect();
            let s = combine(&preds).unwrap();
            let (mean, var) = brute_force_moments(&preds);
            assert!((s.g_hat - mean).abs() < 1e-12);
            assert!((s.sigma_pr * s.sigma_pr - var).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn total_is_quadrature_sum(
            comps in prop::collection::vec((-20.0f64..20.0, 1e-3f64..5.0), 2..16)
        ) {
            let preds: Vec<_> = comps.iter().map(|&(m, s)| gp(m, s)).collect();
            let s = combine(&preds).unwrap();
            prop_assert!(s.sigma_ep >= 0.0 && s.sigma_al > 0.0);
            let resid = s.sigma_pr.powi(2) - s.sigma_al.powi(2) - s.sigma_ep.powi(2);
            prop_assert!(resid.abs() <= 1e-12 * s.sigma_pr.powi(2).max(1.0));
        }
    }
}
