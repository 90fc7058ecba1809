use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::network::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate > 0, epochs >= 1 and batch_size >= 1 required".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Extra loss term evaluated on the parameters alone (weight decay, KL, ...).
pub trait LossHook: Sync {
    /// Returns the penalty and, when `grads` is given, adds its gradient there.
    fn penalty(&self, net: &Network, grads: Option<&mut Gradients>) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches of `nll + penalty`.
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Full-data objective before the first update (deterministic pass).
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_loss, |e| e.loss)
    }
}

fn gather(inputs: &ArrayView2<f64>, targets: &ArrayView1<f64>, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
    (inputs.select(Axis(0), idx), targets.select(Axis(0), idx))
}

/// Mini-batch Adam on mean NLL plus an optional penalty.
///
/// Inputs are raw; the network applies its own stored normalizer. All
/// randomness (shuffling, dropout masks, weight noise) comes from one ChaCha
/// stream seeded by `config.seed`.
pub fn train(
    net: &mut Network,
    inputs: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    config: &TrainConfig,
    hook: Option<&dyn LossHook>,
) -> Result<TrainHistory> {
    config.validate()?;
    let n = inputs.nrows();
    if n == 0 || targets.len() != n {
        return Err(Error::Shape(format!(
            "{n} training inputs with {} targets",
            targets.len()
        )));
    }
    let penalty_only = |net: &Network| hook.map_or(0.0, |h| h.penalty(net, None));
    let initial_loss = net.mean_nll(inputs, targets, &net.no_noise())? + penalty_only(net);

    let adam = config.adam();
    let mut state = AdamState::new(&net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let (x, y) = gather(&inputs, &targets, idx);
            let noise = net.sample_noise(idx.len(), &mut rng);
            let (nll, mut grads) = match net.loss_and_grad(x.view(), y.view(), &noise) {
                Ok(v) => v,
                Err(Error::NonFiniteActivation { .. }) => {
                    return Err(Error::Divergence { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            let pen = hook.map_or(0.0, |h| h.penalty(net, Some(&mut grads)));
            if !(nll + pen).is_finite() || grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss: nll + pen });
            }
            adam_step(&mut state, &mut net.params_mut(), &grads, &adam);
            nll_sum += nll;
            pen_sum += pen;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: (nll_sum + pen_sum) / batches as f64,
            nll: nll_sum / batches as f64,
            penalty: pen_sum / batches as f64,
        };
        log::debug!("epoch {epoch}: loss {:.5} (nll {:.5}, penalty {:.5})", stats.loss, stats.nll, stats.penalty);
        epochs.push(stats);
    }
    Ok(TrainHistory {
        initial_loss,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{Architecture, Normalizer};
    use crate::pendulum::{generate_dataset, Interval, PendulumConfig, SplitTag};

    fn pendulum_data(n: usize, seed: u64, noiseless: bool) -> (Array2<f64>, Array1<f64>) {
        let mut cfg = PendulumConfig {
            seed,
            ..Default::default()
        };
        if noiseless {
            cfg.period_noise_range = Interval::new(0.0, 0.0);
            cfg.length_noise = 0.0;
        }
        let ds = generate_dataset(&cfg, n, SplitTag::Train).unwrap();
        (ds.inputs(), ds.targets())
    }

    fn fresh_net(x: &Array2<f64>, hidden: Vec<usize>, seed: u64) -> Network {
        let arch = Architecture {
            input_dim: 13,
            hidden,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::dense(&arch, Normalizer::fit(x.view()), &mut rng).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = pendulum_data(300, 1, false);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            seed: 9,
            ..Default::default()
        };
        let mut a = fresh_net(&x, vec![16, 16], 2);
        let mut b = a.clone();
        let ha = train(&mut a, x.view(), y.view(), &cfg, None).unwrap();
        let hb = train(&mut b, x.view(), y.view(), &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.epochs.iter().all(|e| e.loss.is_finite()));
        assert!(ha.final_loss() < ha.initial_loss);
    }

    #[test]
    fn full_batch_training_ignores_sample_order() {
        let (x, y) = pendulum_data(64, 3, false);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let rev: Vec<usize> = (0..64).rev().collect();
        let (xr, yr) = (x.select(Axis(0), &rev), y.select(Axis(0), &rev));
        let mut a = fresh_net(&x, vec![8], 4);
        let mut b = a.clone();
        train(&mut a, x.view(), y.view(), &cfg, None).unwrap();
        train(&mut b, xr.view(), yr.view(), &cfg, None).unwrap();
        for (u, v) in a.params_flat().iter().zip(b.params_flat()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = pendulum_data(64, 5, false);
        let mut net = fresh_net(&x, vec![8], 6);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e300,
            ..Default::default()
        };
        let err = train(&mut net, x.view(), y.view(), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (x, y) = pendulum_data(8, 5, false);
        let mut net = fresh_net(&x, vec![4], 6);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&mut net, x.view(), y.view(), &cfg, None).is_err());
    }

    #[test]
    fn noiseless_benchmark_is_learned() {
        let (x, y) = pendulum_data(9000, 21, true);
        let (xt, yt) = pendulum_data(1000, 22, true);
        let mut net = fresh_net(&x, vec![100, 100, 100], 23);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 64,
            seed: 24,
            ..Default::default()
        };
        let hist = train(&mut net, x.view(), y.view(), &cfg, None).unwrap();
        assert!(hist.final_loss() < hist.initial_loss);
        let preds = net.forward_batch(xt.view(), &net.no_noise()).unwrap();
        let mse = preds
            .iter()
            .zip(&yt)
            .map(|(p, y)| (p.mu - y).powi(2))
            .sum::<f64>()
            / yt.len() as f64;
        assert!(mse.sqrt() < 0.05, "rmse {}", mse.sqrt());
    }
}
