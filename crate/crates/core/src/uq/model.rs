use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::combine::{combine, PredictiveSummary};
use super::dropout::{CdRegularizer, ConcreteDropoutLayer};
use super::flipout::{FlipoutLayer, KlPenalty};
use crate::error::{Error, Result};
use crate::nn::{
    train, Activation, Architecture, DenseLayer, GaussianPrediction, Layer, LayerNoise, Network,
    Normalizer, TrainConfig, TrainHistory,
};
use crate::pendulum::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    De,
    Cd,
    Bnn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::De, Method::Cd, Method::Bnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::De => "de",
            Method::Cd => "cd",
            Method::Bnn => "bnn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "de" => Ok(Method::De),
            "cd" => Ok(Method::Cd),
            "bnn" => Ok(Method::Bnn),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdSettings {
    pub temperature: f64,
    pub length_scale_sq: f64,
    pub dropout_scale: f64,
    pub initial_p: f64,
}

impl Default for CdSettings {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            length_scale_sq: 1e-4,
            dropout_scale: 1.0,
            initial_p: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnSettings {
    pub initial_stdev: f64,
}

impl Default for BnnSettings {
    fn default() -> Self {
        Self { initial_stdev: 1e-3 }
    }
}

/// Method hyperparameters that are not part of the optimizer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UqSettings {
    pub architecture: Architecture,
    /// Ensemble size, dropout passes and posterior samples alike.
    pub n_estimates: usize,
    pub cd: CdSettings,
    pub bnn: BnnSettings,
}

impl Default for UqSettings {
    fn default() -> Self {
        Self {
            architecture: Architecture::benchmark(),
            n_estimates: 10,
            cd: CdSettings::default(),
            bnn: BnnSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepEnsemble {
    pub members: Vec<Network>,
    pub histories: Vec<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdModel {
    pub network: Network,
    pub history: Option<TrainHistory>,
}

impl CdModel {
    /// Learned dropout probability of each concrete dropout layer, input side first.
    pub fn dropout_probabilities(&self) -> Vec<f64> {
        self.network
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::ConcreteDropout(c) => Some(c.dropout_probability()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub network: Network,
    pub history: Option<TrainHistory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum UqModel {
    #[serde(rename = "de")]
    DeepEnsemble(DeepEnsemble),
    #[serde(rename = "cd")]
    ConcreteDropout(CdModel),
    #[serde(rename = "bnn")]
    Bnn(BnnModel),
}

/// Whether stochastic layers sample noise at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Disabled,
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 is used by the training loop under the same seed.
    rng.set_stream(1);
    rng
}

fn training_arrays(data: &Dataset) -> Result<(Array2<f64>, ndarray::Array1<f64>)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    Ok((data.inputs(), data.targets()))
}

fn check_arch(settings: &UqSettings, x: &Array2<f64>) -> Result<()> {
    if settings.architecture.input_dim != x.ncols() {
        return Err(Error::Shape(format!(
            "architecture expects {} inputs, data has {}",
            settings.architecture.input_dim,
            x.ncols()
        )));
    }
    Ok(())
}

/// Dense input layer, then concrete dropout on the input of every later layer.
pub fn build_cd_network<R: Rng + ?Sized>(
    arch: &Architecture,
    normalizer: Normalizer,
    cd: &CdSettings,
    rng: &mut R,
) -> Result<Network> {
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let act = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            let dense = DenseLayer::he_init(fan_in, fan_out, act, rng);
            if i == 0 {
                Layer::Dense(dense)
            } else {
                Layer::ConcreteDropout(ConcreteDropoutLayer::new(dense, cd.initial_p, cd.temperature))
            }
        })
        .collect();
    Network::new(layers, normalizer)
}

/// Every layer, head included, is a flipout layer.
pub fn build_bnn_network<R: Rng + ?Sized>(
    arch: &Architecture,
    normalizer: Normalizer,
    bnn: &BnnSettings,
    rng: &mut R,
) -> Result<Network> {
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    let layers = dims
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let act = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            Layer::Flipout(FlipoutLayer::new(fan_in, fan_out, act, bnn.initial_stdev, rng))
        })
        .collect();
    Network::new(layers, normalizer)
}

/// Trains `n_estimates` independently initialized networks with seeds `seed + i`.
pub fn train_deep_ensemble(data: &Dataset, config: &TrainConfig, settings: &UqSettings) -> Result<DeepEnsemble> {
    let (x, y) = training_arrays(data)?;
    check_arch(settings, &x)?;
    let normalizer = Normalizer::fit(x.view());
    let trained: Vec<Result<(Network, TrainHistory)>> = (0..settings.n_estimates)
        .into_par_iter()
        .map(|i| {
            let member_cfg = TrainConfig {
                seed: config.seed.wrapping_add(i as u64),
                ..config.clone()
            };
            let mut net = Network::dense(
                &settings.architecture,
                normalizer.clone(),
                &mut init_rng(member_cfg.seed),
            )?;
            let hist = train(&mut net, x.view(), y.view(), &member_cfg, None).map_err(|e| {
                Error::MemberFailed {
                    member: i,
                    source: Box::new(e),
                }
            })?;
            Ok((net, hist))
        })
        .collect();
    let mut members = Vec::with_capacity(trained.len());
    let mut histories = Vec::with_capacity(trained.len());
    for r in trained {
        let (net, hist) = r?;
        members.push(net);
        histories.push(hist);
    }
    Ok(DeepEnsemble { members, histories })
}

pub fn train_concrete_dropout(data: &Dataset, config: &TrainConfig, settings: &UqSettings) -> Result<CdModel> {
    let (x, y) = training_arrays(data)?;
    check_arch(settings, &x)?;
    let mut net = build_cd_network(
        &settings.architecture,
        Normalizer::fit(x.view()),
        &settings.cd,
        &mut init_rng(config.seed),
    )?;
    let reg = CdRegularizer {
        length_scale_sq: settings.cd.length_scale_sq,
        dropout_scale: settings.cd.dropout_scale,
        n_train: data.len(),
    };
    let history = train(&mut net, x.view(), y.view(), config, Some(&reg))?;
    Ok(CdModel {
        network: net,
        history: Some(history),
    })
}

pub fn train_bnn(data: &Dataset, config: &TrainConfig, settings: &UqSettings) -> Result<BnnModel> {
    let (x, y) = training_arrays(data)?;
    check_arch(settings, &x)?;
    let mut net = build_bnn_network(
        &settings.architecture,
        Normalizer::fit(x.view()),
        &settings.bnn,
        &mut init_rng(config.seed),
    )?;
    let kl = KlPenalty { n_train: data.len() };
    let history = train(&mut net, x.view(), y.view(), config, Some(&kl))?;
    Ok(BnnModel {
        network: net,
        history: Some(history),
    })
}

pub fn train_model(method: Method, data: &Dataset, config: &TrainConfig, settings: &UqSettings) -> Result<UqModel> {
    Ok(match method {
        Method::De => UqModel::DeepEnsemble(train_deep_ensemble(data, config, settings)?),
        Method::Cd => UqModel::ConcreteDropout(train_concrete_dropout(data, config, settings)?),
        Method::Bnn => UqModel::Bnn(train_bnn(data, config, settings)?),
    })
}

impl UqModel {
    pub fn method(&self) -> Method {
        match self {
            UqModel::DeepEnsemble(_) => Method::De,
            UqModel::ConcreteDropout(_) => Method::Cd,
            UqModel::Bnn(_) => Method::Bnn,
        }
    }

    pub fn is_trained(&self) -> bool {
        match self {
            UqModel::DeepEnsemble(de) => {
                !de.members.is_empty() && de.histories.len() == de.members.len()
            }
            UqModel::ConcreteDropout(m) => m.history.is_some(),
            UqModel::Bnn(m) => m.history.is_some(),
        }
    }

    pub fn networks(&self) -> Vec<&Network> {
        match self {
            UqModel::DeepEnsemble(de) => de.members.iter().collect(),
            UqModel::ConcreteDropout(m) => vec![&m.network],
            UqModel::Bnn(m) => vec![&m.network],
        }
    }

    /// N (μ, σ) draws per input row: one per ensemble member, or `n_passes`
    /// stochastic passes for the single-network methods.
    pub fn sample_predictions<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        n_passes: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Vec<Vec<GaussianPrediction>>> {
        if !self.is_trained() {
            return Err(Error::Untrained);
        }
        let batch = inputs.nrows();
        let passes: Vec<Vec<GaussianPrediction>> = match self {
            UqModel::DeepEnsemble(de) => de
                .members
                .iter()
                .map(|m| m.forward_batch(inputs, &m.no_noise()))
                .collect::<Result<_>>()?,
            UqModel::ConcreteDropout(CdModel { network, .. }) | UqModel::Bnn(BnnModel { network, .. }) => {
                (0..n_passes)
                    .map(|_| {
                        let noise: Vec<LayerNoise> = match sampling {
                            Sampling::Stochastic => network.sample_noise(batch, rng),
                            Sampling::Disabled => network.no_noise(),
                        };
                        network.forward_batch(inputs, &noise)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok((0..batch)
            .map(|i| passes.iter().map(|p| p[i]).collect())
            .collect())
    }

    pub fn predict_batch<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        n_passes: usize,
        rng: &mut R,
    ) -> Result<Vec<PredictiveSummary>> {
        self.predict_batch_with(inputs, n_passes, Sampling::Stochastic, rng)
    }

    pub fn predict_batch_with<R: Rng + ?Sized>(
        &self,
        inputs: ArrayView2<f64>,
        n_passes: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Vec<PredictiveSummary>> {
        self.sample_predictions(inputs, n_passes, sampling, rng)?
            .iter()
            .map(|draws| combine(draws))
            .collect()
    }

    /// Combined prediction for one raw input vector.
    pub fn predict<R: Rng + ?Sized>(&self, input: &[f64], n_passes: usize, rng: &mut R) -> Result<PredictiveSummary> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_batch(x, n_passes, rng)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::{generate_dataset, sample_rng, PendulumConfig, SplitTag};

    fn small_settings() -> UqSettings {
        UqSettings {
            architecture: Architecture {
                input_dim: 13,
                hidden: vec![16, 16],
            },
            ..Default::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_dataset(
            &PendulumConfig {
                seed: 40,
                ..Default::default()
            },
            256,
            SplitTag::Train,
        )
        .unwrap()
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 64,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("mcd".parse::<Method>().is_err());
    }

    #[test]
    fn ensemble_members_differ_by_seed() {
        let de = train_deep_ensemble(&tiny_data(), &quick_cfg(7), &small_settings()).unwrap();
        assert_eq!(de.members.len(), 10);
        assert_ne!(de.members[0], de.members[1]);
        let again = train_deep_ensemble(&tiny_data(), &quick_cfg(7), &small_settings()).unwrap();
        assert_eq!(de, again);
    }

    #[test]
    fn identical_members_have_zero_epistemic() {
        let mut de = train_deep_ensemble(&tiny_data(), &quick_cfg(8), &small_settings()).unwrap();
        let first = de.members[0].clone();
        de.members.iter_mut().for_each(|m| *m = first.clone());
        let model = UqModel::DeepEnsemble(de);
        let s = model
            .predict(&tiny_data().samples[0].inputs(), 10, &mut sample_rng(0, 0))
            .unwrap();
        assert_eq!(s.sigma_ep, 0.0);
        assert_eq!(s.n_components, 10);
    }

    #[test]
    fn untrained_model_is_rejected() {
        let net = build_bnn_network(
            &small_settings().architecture,
            Normalizer::identity(13),
            &BnnSettings::default(),
            &mut sample_rng(1, 0),
        )
        .unwrap();
        let model = UqModel::Bnn(BnnModel {
            network: net,
            history: None,
        });
        assert!(matches!(
            model.predict(&[1.0; 13], 10, &mut sample_rng(0, 0)),
            Err(Error::Untrained)
        ));
    }

    #[test]
    fn cd_with_vanishing_dropout_is_deterministic() {
        let mut cd = train_concrete_dropout(&tiny_data(), &quick_cfg(9), &small_settings()).unwrap();
        for l in &mut cd.network.layers {
            if let Layer::ConcreteDropout(c) = l {
                c.logit_p = -80.0;
            }
        }
        let x = tiny_data().samples[3].inputs();
        let det = cd.network.forward(&x).unwrap();
        let s = UqModel::ConcreteDropout(cd)
            .predict(&x, 10, &mut sample_rng(0, 1))
            .unwrap();
        assert!(s.sigma_ep < 1e-12);
        assert!((s.g_hat - det.mu).abs() < 1e-9);
    }

    #[test]
    fn disabled_sampling_reduces_to_mean_network() {
        let data = tiny_data();
        let x = data.inputs();
        let bnn = UqModel::Bnn(train_bnn(&data, &quick_cfg(10), &small_settings()).unwrap());
        let cd = UqModel::ConcreteDropout(train_concrete_dropout(&data, &quick_cfg(10), &small_settings()).unwrap());
        for model in [bnn, cd] {
            let net = model.networks()[0].clone();
            let det = net.forward_batch(x.view(), &net.no_noise()).unwrap();
            let s = model
                .predict_batch_with(x.view(), 10, Sampling::Disabled, &mut sample_rng(0, 2))
                .unwrap();
            for (a, b) in s.iter().zip(&det) {
                assert_eq!(a.sigma_ep, 0.0);
                assert!((a.g_hat - b.mu).abs() < 1e-12);
                assert!((a.sigma_al - b.sigma).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_is_reproducible_under_seed() {
        let data = tiny_data();
        let model = UqModel::Bnn(train_bnn(&data, &quick_cfg(11), &small_settings()).unwrap());
        let x = data.samples[5].inputs();
        let a = model.predict(&x, 10, &mut sample_rng(3, 3)).unwrap();
        let b = model.predict(&x, 10, &mut sample_rng(3, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.sigma_ep > 0.0);
    }

    #[test]
    fn cd_layers_skip_raw_inputs() {
        let net = build_cd_network(
            &Architecture::benchmark(),
            Normalizer::identity(13),
            &CdSettings::default(),
            &mut sample_rng(2, 0),
        )
        .unwrap();
        assert_eq!(net.layers[0].kind(), "dense");
        assert!(net.layers[1..].iter().all(|l| l.kind() == "concrete_dropout"));
        let model = CdModel {
            network: net,
            history: None,
        };
        for p in model.dropout_probabilities() {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }
}
