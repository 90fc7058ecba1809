//! Evaluation metrics: reliability curves, correlation with the analytic
//! uncertainty, accuracy, the constant-relative-uncertainty detector and the
//! epistemic-versus-shift sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::pendulum::{Dataset, Interval, OodKind, PendulumSample};
use crate::propagation::propagate;
use crate::uq::{PredictiveSummary, UqModel};

/// Default detector threshold on `stdev(predicted)/stdev(analytic)`.
pub const CONSTANT_UNCERTAINTY_THRESHOLD: f64 = 0.2;

/// Minimum record count for the reliability curve and constant detector.
pub const MIN_EVAL_SAMPLES: usize = 100;

/// Nominal central-interval coverages 0.05, 0.10, …, 0.95.
pub fn nominal_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// Half-width, in standard deviations, of the central interval holding `q` of a normal.
pub fn central_interval_z(q: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(0.5 * (1.0 + q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub nominal_coverages: Vec<f64>,
    pub empirical_coverages: Vec<f64>,
    pub n_samples: usize,
}

impl ReliabilityCurve {
    pub fn max_abs_deviation(&self) -> f64 {
        self.deviations().fold(0.0, |m, d| m.max(d.abs()))
    }

    /// Largest shortfall `nominal − empirical` (positive when intervals are too narrow).
    pub fn max_deficit(&self) -> f64 {
        self.deviations().fold(0.0, |m, d| m.max(-d))
    }

    fn deviations(&self) -> impl Iterator<Item = f64> + '_ {
        self.empirical_coverages
            .iter()
            .zip(&self.nominal_coverages)
            .map(|(e, n)| e - n)
    }
}

pub fn reliability_curve(
    predictions: &[PredictiveSummary],
    truths: &[f64],
    grid: &[f64],
) -> Result<ReliabilityCurve> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::InsufficientData(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.len() < MIN_EVAL_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "reliability curve needs at least {MIN_EVAL_SAMPLES} samples"
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::InvalidConfig(
            "nominal grid must be strictly increasing inside (0, 1)".into(),
        ));
    }
    // Standardized absolute residuals, sorted once.
    let mut scores: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .map(|(p, &t)| {
            let r = (t - p.g_hat).abs();
            if r == 0.0 {
                0.0
            } else {
                r / p.sigma_pr
            }
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len() as f64;
    let empirical = grid
        .iter()
        .map(|&q| {
            let z = central_interval_z(q);
            scores.partition_point(|&s| s <= z) as f64 / n
        })
        .collect();
    Ok(ReliabilityCurve {
        nominal_coverages: grid.to_vec(),
        empirical_coverages: empirical,
        n_samples: predictions.len(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample stdev, accumulated about the first value so constant input gives exactly 0.
fn sample_stdev(xs: &[f64]) -> f64 {
    let origin = xs[0];
    let m = xs.iter().map(|x| x - origin).sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - origin - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "correlation needs two equal-length series of at least 2 values ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub analytic_sigma_rel: f64,
    pub analytic_g: f64,
    /// `σ_al / ĝ`
    pub predicted_sigma_al_rel: f64,
    /// `σ_ep / ĝ`
    pub predicted_sigma_ep_rel: f64,
    pub g_true: f64,
    pub g_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyComparison {
    pub records: Vec<UncertaintyRecord>,
    /// `None` when either side has zero variance.
    pub pearson_r: Option<f64>,
    pub rmse_g: f64,
    pub mean_predicted_sigma_rel: f64,
    pub stdev_predicted_sigma_rel: f64,
    pub constant_statistic: f64,
    pub constant_prediction_flag: bool,
}

/// Joins predictions with the analytic propagation of each sample.
pub fn compare_uncertainties(
    predictions: &[PredictiveSummary],
    samples: &[PendulumSample],
    length_noise_assumed: f64,
    threshold: f64,
) -> Result<UncertaintyComparison> {
    if predictions.len() != samples.len() || predictions.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let records = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            let a = propagate(s, length_noise_assumed)?;
            Ok(UncertaintyRecord {
                analytic_sigma_rel: a.sigma_rel,
                analytic_g: a.g_estimate,
                predicted_sigma_al_rel: p.sigma_al / p.g_hat,
                predicted_sigma_ep_rel: p.sigma_ep / p.g_hat,
                g_true: s.g_true,
                g_hat: p.g_hat,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<f64> = records.iter().map(|r| r.predicted_sigma_al_rel).collect();
    let analytic: Vec<f64> = records.iter().map(|r| r.analytic_sigma_rel).collect();
    let pearson_r = match pearson_correlation(&predicted, &analytic) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let g_hat: Vec<f64> = records.iter().map(|r| r.g_hat).collect();
    let g_true: Vec<f64> = records.iter().map(|r| r.g_true).collect();
    let rmse_g = accuracy_metrics(&g_hat, &g_true)?.rmse;
    let mut cmp = UncertaintyComparison {
        mean_predicted_sigma_rel: mean(&predicted),
        stdev_predicted_sigma_rel: if predicted.len() > 1 {
            sample_stdev(&predicted)
        } else {
            0.0
        },
        records,
        pearson_r,
        rmse_g,
        constant_statistic: f64::NAN,
        constant_prediction_flag: false,
    };
    if cmp.records.len() >= MIN_EVAL_SAMPLES {
        let check = detect_constant_relative_uncertainty(&cmp, threshold)?;
        cmp.constant_statistic = check.statistic;
        cmp.constant_prediction_flag = check.flag;
    }
    Ok(cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantCheck {
    pub flag: bool,
    /// `stdev(predicted σ_rel) / stdev(analytic σ_rel)`
    pub statistic: f64,
}

/// Flags models whose relative aleatoric uncertainty barely varies compared
/// with the analytic reference.
pub fn detect_constant_relative_uncertainty(
    comparison: &UncertaintyComparison,
    threshold: f64,
) -> Result<ConstantCheck> {
    if comparison.records.len() < MIN_EVAL_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "constant-uncertainty check needs at least {MIN_EVAL_SAMPLES} records"
        )));
    }
    let predicted: Vec<f64> = comparison.records.iter().map(|r| r.predicted_sigma_al_rel).collect();
    let analytic: Vec<f64> = comparison.records.iter().map(|r| r.analytic_sigma_rel).collect();
    let sa = sample_stdev(&analytic);
    if sa == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "analytic uncertainty is constant; ratio undefined".into(),
        ));
    }
    let statistic = sample_stdev(&predicted) / sa;
    Ok(ConstantCheck {
        flag: statistic < threshold,
        statistic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean of `prediction − truth`; negative when predictions fall short.
    pub mean_signed_error: f64,
}

pub fn accuracy_metrics(predictions: &[f64], truths: &[f64]) -> Result<AccuracyMetrics> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::InsufficientData(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let n = predictions.len() as f64;
    let (mut se, mut ae, mut e) = (0.0, 0.0, 0.0);
    for (p, t) in predictions.iter().zip(truths) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
        e += d;
    }
    Ok(AccuracyMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        mean_signed_error: e / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpistemicLevel {
    /// Which quantity the level shifts, `None` for in-distribution data.
    pub kind: Option<OodKind>,
    pub range: Interval,
    pub median_sigma_ep: f64,
    pub n_samples: usize,
}

/// Range a dataset was drawn from along the swept quantity.
fn shift_range(ds: &Dataset) -> (Option<OodKind>, Interval) {
    match ds.ood {
        Some(spec) => (Some(spec.kind), spec.target_range),
        None => (None, ds.config.l_range),
    }
}

/// Median epistemic uncertainty per dataset, in sweep order.
pub fn epistemic_vs_distance<R: Rng + ?Sized>(
    model: &UqModel,
    sweep: &[&Dataset],
    n_passes: usize,
    rng: &mut R,
) -> Result<Vec<EpistemicLevel>> {
    if sweep.len() < 2 {
        return Err(Error::InsufficientData("sweep needs at least 2 levels".into()));
    }
    sweep
        .iter()
        .map(|ds| {
            let preds = model.predict_batch(ds.inputs().view(), n_passes, rng)?;
            Ok(summarize_epistemic(ds, &preds))
        })
        .collect()
}

pub fn summarize_epistemic(ds: &Dataset, preds: &[PredictiveSummary]) -> EpistemicLevel {
    let (kind, range) = shift_range(ds);
    let ep: Vec<f64> = preds.iter().map(|p| p.sigma_ep).collect();
    EpistemicLevel {
        kind,
        range,
        median_sigma_ep: median(&ep),
        n_samples: preds.len(),
    }
}
