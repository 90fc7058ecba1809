//! Dense-network engine shared by every uncertainty method: layers with
//! hand-written backward passes, the Gaussian NLL head, Adam and the
//! mini-batch training loop.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod network;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{Activation, DenseLayer, Layer, LayerNoise};
pub use loss::{nll_loss, softplus, GaussianPrediction, SIGMA_FLOOR};
pub use network::{Architecture, Gradients, Network, Normalizer};
pub use train::{train, EpochStats, LossHook, TrainConfig, TrainHistory};
