//! Deep ensembles, concrete dropout and flipout Bayesian layers, and the
//! Gaussian-mixture combination of their stochastic predictions.

pub mod combine;
pub mod dropout;
pub mod flipout;
pub mod model;

pub use combine::{combine, PredictiveSummary};
pub use dropout::{cd_regularizer, CdRegularizer, ConcreteDropoutLayer};
pub use flipout::{kl_diag_gaussian, FlipoutLayer, KlPenalty};
pub use model::{
    build_bnn_network, build_cd_network, train_bnn, train_concrete_dropout, train_deep_ensemble,
    train_model, BnnModel, BnnSettings, CdModel, CdSettings, DeepEnsemble, Method, Sampling,
    UqModel, UqSettings,
};
