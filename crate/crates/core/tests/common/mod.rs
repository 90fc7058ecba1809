//! Numerical oracles shared by the `numerics` and `acceptance` test targets.
//!
//! Every check returns the worst observed discrepancy together with the
//! tolerance it is judged against, so callers can both assert and report.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Axis};
use pendulum_uq::nn::{
    Activation, Architecture, DenseLayer, Layer, LossHook, Network, Normalizer,
};
use pendulum_uq::nn::GaussianPrediction;
use pendulum_uq::pendulum::{
    generate_dataset, gravitational_accel, sample_rng, true_period, PendulumConfig, SplitTag,
};
use pendulum_uq::propagation::{monte_carlo_propagate, propagate};
use pendulum_uq::uq::{
    combine, kl_diag_gaussian, BnnSettings, CdRegularizer, CdSettings, ConcreteDropoutLayer,
    FlipoutLayer, KlPenalty,
};
use pendulum_uq::uq::{build_bnn_network, build_cd_network};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub limit: f64,
}

impl Check {
    fn new(name: impl Into<String>, worst: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            limit,
        }
    }

    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.limit
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: worst {:.3e} (limit {:.1e})",
            if self.passed() { "ok  " } else { "FAIL" },
            self.name,
            self.worst,
            self.limit
        )
    }
}

// ---------------------------------------------------------------- gradients

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Arch {
    Dense,
    Concrete,
    Flipout,
}

/// Zero biases put a unit whose inputs are all dropped (or dead) exactly on
/// the ReLU kink, where a central difference is meaningless.
fn jitter_biases<R: Rng + ?Sized>(net: &mut Network, rng: &mut R) {
    for layer in net.layers.iter_mut() {
        let biases = match layer {
            Layer::Dense(l) => &mut l.biases,
            Layer::ConcreteDropout(l) => &mut l.inner.biases,
            Layer::Flipout(_) => continue,
        };
        biases.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
}

/// Keeps every predicted sigma O(1): a near-zero sigma makes the NLL so curved
/// that central-difference truncation error dwarfs the tolerance.
fn lift_scale_head(net: &mut Network) {
    let (weights, bias) = match net.layers.last_mut().expect("output layer") {
        Layer::Dense(l) => (&mut l.weights, &mut l.biases[1]),
        Layer::ConcreteDropout(l) => (&mut l.inner.weights, &mut l.inner.biases[1]),
        Layer::Flipout(l) => (&mut l.weight_mean, &mut l.bias_mean[1]),
    };
    weights.row_mut(1).mapv_inplace(|w| 0.1 * w);
    *bias = 1.5;
}

fn build(arch: Arch, dims: &Architecture, seed: u64) -> (Network, Option<Box<dyn LossHook>>) {
    let (mut net, hook) = build_raw(arch, dims, seed);
    lift_scale_head(&mut net);
    (net, hook)
}

fn build_raw(arch: Arch, dims: &Architecture, seed: u64) -> (Network, Option<Box<dyn LossHook>>) {
    let mut rng = sample_rng(seed, 0);
    let norm = Normalizer::identity(dims.input_dim);
    match arch {
        Arch::Dense => {
            let mut net = Network::dense(dims, norm, &mut rng).unwrap();
            jitter_biases(&mut net, &mut rng);
            (net, None)
        }
        Arch::Concrete => {
            let cd = CdSettings {
                initial_p: 0.2,
                ..CdSettings::default()
            };
            let mut net = build_cd_network(dims, norm, &cd, &mut rng).unwrap();
            // Distinct rates per layer so every logit gradient differs.
            for (k, layer) in net.layers.iter_mut().enumerate() {
                if let Layer::ConcreteDropout(l) = layer {
                    l.logit_p += 0.3 * k as f64;
                }
            }
            jitter_biases(&mut net, &mut rng);
            let hook = CdRegularizer {
                length_scale_sq: 1e-2,
                dropout_scale: 1.0,
                n_train: 50,
            };
            (net, Some(Box::new(hook)))
        }
        Arch::Flipout => {
            let bnn = BnnSettings { initial_stdev: 0.05 };
            let mut net = build_bnn_network(dims, norm, &bnn, &mut rng).unwrap();
            // Spread the posterior scales and bias means away from their initial values.
            for layer in net.layers.iter_mut() {
                if let Layer::Flipout(l) = layer {
                    l.weight_rho.mapv_inplace(|r| r + rng.random_range(-0.5..0.5));
                    l.bias_rho.mapv_inplace(|r| r + rng.random_range(-0.5..0.5));
                    l.bias_mean.mapv_inplace(|_| rng.random_range(-0.1..0.1));
                }
            }
            // A realistic training-set size keeps the objective O(1), so the
            // central difference is not swamped by roundoff of a large KL.
            (net, Some(Box::new(KlPenalty { n_train: 9000 })))
        }
    }
}

fn objective(net: &Network, hook: Option<&dyn LossHook>, x: &Array2<f64>, y: &Array1<f64>, noise: &[pendulum_uq::nn::LayerNoise]) -> f64 {
    let (loss, _) = net.loss_and_grad(x.view(), y.view(), noise).unwrap();
    loss + hook.map_or(0.0, |h| h.penalty(net, None))
}

/// Worst relative error between backprop gradients and central differences.
///
/// Stochastic layers use one fixed noise draw, so the objective is a
/// deterministic function of the parameters. `stride` subsamples coordinates
/// on large networks.
pub fn gradient_check(arch: Arch, dims: &Architecture, seed: u64, batch: usize, stride: usize) -> f64 {
    let (mut net, hook) = build(arch, dims, seed);
    let hook = hook.as_deref();
    let mut rng = sample_rng(seed, 1);
    let x = Array2::from_shape_simple_fn((batch, dims.input_dim), || rng.sample::<f64, _>(StandardNormal));
    let noise = net.sample_noise(batch, &mut rng);
    // Targets one predicted sigma around the prediction keep the NLL O(1);
    // otherwise the loss value, not the gradient, limits finite-difference accuracy.
    let preds = net.forward_batch(x.view(), &noise).unwrap();
    let y = Array1::from_iter(preds.iter().map(|p| p.mu + p.sigma * rng.sample::<f64, _>(StandardNormal)));

    let (_, mut grads) = net.loss_and_grad(x.view(), y.view(), &noise).unwrap();
    if let Some(h) = hook {
        h.penalty(&net, Some(&mut grads));
    }
    let analytic = grads.flatten();
    let theta = net.params_flat();
    assert_eq!(analytic.len(), theta.len());

    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for i in (0..theta.len()).step_by(stride) {
        probe[i] = theta[i] + FD_STEP;
        net.set_params_flat(&probe);
        let up = objective(&net, hook, &x, &y, &noise);
        probe[i] = theta[i] - FD_STEP;
        net.set_params_flat(&probe);
        let down = objective(&net, hook, &x, &y, &noise);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    net.set_params_flat(&theta);
    worst
}

pub fn small_architecture() -> Architecture {
    Architecture {
        input_dim: 13,
        hidden: vec![7, 6, 5],
    }
}

pub fn gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (label, arch_small, arch_big) in [
        ("dense", Arch::Dense, Arch::Dense),
        ("concrete dropout", Arch::Concrete, Arch::Concrete),
        ("flipout", Arch::Flipout, Arch::Flipout),
    ] {
        let all = gradient_check(arch_small, &small_architecture(), 11, 6, 1);
        out.push(Check::new(format!("gradient {label} (small, every parameter)"), all, 1e-5));
        let big = gradient_check(arch_big, &Architecture::benchmark(), 12, 4, 97);
        out.push(Check::new(format!("gradient {label} (13-100-100-100-2, strided)"), big, 1e-5));
    }
    out
}

// ------------------------------------------------------------------ combine

/// Mixture mean and variance from the component densities' definition.
fn mixture_moments(p: &[GaussianPrediction]) -> (f64, f64) {
    let w = 1.0 / p.len() as f64;
    let mean: f64 = p.iter().map(|c| w * c.mu).sum();
    let var: f64 = p
        .iter()
        .map(|c| w * (c.sigma * c.sigma + (c.mu - mean) * (c.mu - mean)))
        .sum();
    (mean, var)
}

pub fn combine_check() -> Check {
    let mut rng = sample_rng(21, 0);
    let mut worst = 0.0f64;
    for trial in 0..2000 {
        let n = 2 + trial % 15;
        let preds: Vec<GaussianPrediction> = (0..n)
            .map(|_| GaussianPrediction {
                mu: rng.random_range(0.0..30.0),
                sigma: rng.random_range(1e-3..3.0),
            })
            .collect();
        let s = combine(&preds).unwrap();
        let (mean, var) = mixture_moments(&preds);
        worst = worst.max((s.g_hat - mean).abs());
        worst = worst.max((s.sigma_pr * s.sigma_pr - var).abs());
    }
    Check::new("combine vs mixture moments", worst, 1e-12)
}

// ----------------------------------------------------------------------- KL

pub fn kl_check() -> Check {
    let mut rng = sample_rng(22, 0);
    let dim = 20;
    let means: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let stdevs: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..1.5)).collect();
    let closed = kl_diag_gaussian(means.iter().copied(), stdevs.iter().copied());
    // KL = E_q[log q(w) − log p(w)], p = N(0, 1).
    let draws = 200_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for (m, s) in means.iter().zip(&stdevs) {
            let z: f64 = rng.sample(StandardNormal);
            let w = m + s * z;
            log_ratio += -s.ln() - 0.5 * z * z + 0.5 * w * w;
        }
        total += log_ratio;
    }
    let mc = total / draws as f64;
    Check::new("KL closed form vs Monte-Carlo (relative)", (mc / closed - 1.0).abs(), 0.01)
}

// ------------------------------------------------------------------ flipout

fn flipout_test_layer() -> FlipoutLayer {
    let mut rng = sample_rng(23, 0);
    let mut layer = FlipoutLayer::new(4, 3, Activation::Identity, 0.3, &mut rng);
    layer.weight_rho.mapv_inplace(|r| r + rng.random_range(-0.3..0.3));
    layer.bias_mean = Array1::from_vec(vec![2.0, -3.0, 1.5]);
    layer
}

/// Per-output mean and variance of flipout samples against independent
/// weight sampling, as worst relative differences.
pub fn flipout_moment_check() -> (Check, Check) {
    let layer = flipout_test_layer();
    let x = Array2::from_shape_vec((1, 4), vec![0.7, -1.2, 0.4, 2.0]).unwrap();
    let draws = 100_000;
    let w_sd = layer.weight_stdev();
    let b_sd = layer.bias_stdev();

    let mut rng = sample_rng(23, 1);
    let mut flip = Vec::with_capacity(draws);
    for _ in 0..draws {
        flip.push(layer.flipout_forward(&x, &mut rng).row(0).to_owned());
    }
    let mut rng = sample_rng(23, 2);
    let mut naive = Vec::with_capacity(draws);
    for _ in 0..draws {
        let w = &layer.weight_mean + &(&w_sd * &Array2::from_shape_simple_fn(w_sd.raw_dim(), || rng.sample::<f64, _>(StandardNormal)));
        let b = &layer.bias_mean + &(&b_sd * &Array1::from_shape_simple_fn(b_sd.len(), || rng.sample::<f64, _>(StandardNormal)));
        naive.push(w.dot(&x.row(0)) + b);
    }
    let moments = |rows: &[Array1<f64>]| {
        let n = rows.len() as f64;
        let stacked = ndarray::stack(Axis(0), &rows.iter().map(|r| r.view()).collect::<Vec<_>>()).unwrap();
        let mean = stacked.sum_axis(Axis(0)) / n;
        let var = stacked.var_axis(Axis(0), 1.0);
        (mean, var)
    };
    let (mf, vf) = moments(&flip);
    let (mn, vn) = moments(&naive);
    let mean_err = mf.iter().zip(&mn).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
    let var_err = vf.iter().zip(&vn).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
    (
        Check::new("flipout mean vs naive weight sampling (relative)", mean_err, 0.05),
        Check::new("flipout variance vs naive weight sampling (relative)", var_err, 0.05),
    )
}

/// |corr| of the stochastic output component between two examples of one batch.
pub fn flipout_cross_correlation() -> f64 {
    let layer = flipout_test_layer();
    let row = [0.7, -1.2, 0.4, 2.0];
    let x = Array2::from_shape_vec((2, 4), [row, row].concat()).unwrap();
    let mean_out = layer.weight_mean.dot(&Array1::from_vec(row.to_vec())) + &layer.bias_mean;
    let mut rng = sample_rng(24, 0);
    let draws = 100_000;
    let (mut a, mut b) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
    for _ in 0..draws {
        let out = layer.flipout_forward(&x, &mut rng);
        a.push(out[[0, 0]] - mean_out[0]);
        b.push(out[[1, 0]] - mean_out[0]);
    }
    pendulum_uq::metrics::pearson_correlation(&a, &b).unwrap().abs()
}

// ----------------------------------------------------------- concrete masks

/// Worst |mean mask − (1 − p)| in units of its standard error.
pub fn concrete_mask_check() -> Check {
    let mut worst = 0.0f64;
    for (k, &p) in [0.05, 0.1, 0.3, 0.5].iter().enumerate() {
        let layer = ConcreteDropoutLayer::new(DenseLayer::zeros(1, 1, Activation::Identity), p, 0.1);
        let mut rng = sample_rng(25, k as u64);
        let draws = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let m = layer.concrete_mask(1, &mut rng)[0];
            s += m;
            s2 += m * m;
        }
        let n = draws as f64;
        let mean = s / n;
        let se = ((s2 / n - mean * mean) / (n - 1.0)).sqrt();
        worst = worst.max((mean - (1.0 - p)).abs() / se);
    }
    Check::new("concrete mask mean vs 1-p (standard errors)", worst, 3.0)
}

// ------------------------------------------------------------ pendulum law

pub fn round_trip_check() -> Check {
    let mut rng = sample_rng(26, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let l = 10f64.powf(rng.random_range(-2.0..1.0));
        let g = 10f64.powf(rng.random_range(-1.0..2.0));
        let back = gravitational_accel(l, true_period(l, g).unwrap()).unwrap();
        worst = worst.max((back / g - 1.0).abs());
    }
    Check::new("pendulum law round trip (relative)", worst, 1e-12)
}

/// Linear propagation against Monte-Carlo resampling on generated samples
/// whose analytic relative uncertainty is at most 0.1.
pub fn propagation_check() -> (Check, usize) {
    let cfg = PendulumConfig::default();
    let data = generate_dataset(&PendulumConfig { seed: 27, ..cfg.clone() }, 300, SplitTag::Test).unwrap();
    let mut worst = 0.0f64;
    let mut used = 0;
    for (i, s) in data.samples.iter().enumerate() {
        let u = propagate(s, cfg.length_noise).unwrap();
        if u.sigma_rel > 0.1 {
            continue;
        }
        let mc = monte_carlo_propagate(s, cfg.length_noise, 100_000, &mut sample_rng(28, i as u64)).unwrap();
        worst = worst.max((mc / u.sigma_rel - 1.0).abs());
        used += 1;
    }
    (Check::new("propagate vs monte_carlo_propagate (relative)", worst, 0.05), used)
}

/// Every check of the numerics suite, in reporting order.
pub fn numerics_suite() -> Vec<Check> {
    let mut checks = gradient_checks();
    checks.push(combine_check());
    checks.push(kl_check());
    let (m, v) = flipout_moment_check();
    checks.push(m);
    checks.push(v);
    checks.push(Check::new("flipout cross-example correlation", flipout_cross_correlation(), 0.01));
    checks.push(concrete_mask_check());
    checks.push(round_trip_check());
    checks.push(propagation_check().0);
    checks
}
