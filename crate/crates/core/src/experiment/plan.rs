use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::config_hash;
use crate::nn::TrainConfig;
use crate::pendulum::{Interval, OodSpec, PendulumConfig};
use crate::uq::{Method, UqSettings};

/// Period-noise ranges the benchmark is defined for.
pub const NOISE_RANGES: [(f64, f64); 3] = [(0.01, 0.05), (0.01, 0.10), (0.01, 0.20)];

/// Optimizer schedule of one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Schedule {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Dataset sizes and per-method schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Rows per out-of-distribution set.
    pub n_ood: usize,
    pub de: Schedule,
    pub cd: Schedule,
    pub bnn: Schedule,
}

impl Scale {
    pub fn full() -> Self {
        Self {
            n_train: 90_000,
            n_validation: 10_000,
            n_test: 10_000,
            n_ood: 10_000,
            de: Schedule {
                learning_rate: 1e-3,
                epochs: 40,
                batch_size: 128,
            },
            cd: Schedule {
                learning_rate: 1e-3,
                epochs: 200,
                batch_size: 128,
            },
            bnn: Schedule {
                learning_rate: 1e-4,
                epochs: 200,
                batch_size: 128,
            },
        }
    }

    /// A tenth of the data and a quarter of the epochs.
    ///
    /// The batch shrinks with the data so an epoch keeps roughly the same
    /// number of optimizer steps as at full scale.
    pub fn reduced() -> Self {
        let full = Self::full();
        let shrink = |s: Schedule| Schedule {
            epochs: s.epochs / 4,
            batch_size: REDUCED_BATCH,
            ..s
        };
        Self {
            n_train: 9_000,
            n_validation: 1_000,
            n_test: 1_000,
            n_ood: 1_000,
            de: shrink(full.de),
            cd: shrink(full.cd),
            bnn: shrink(full.bnn),
        }
    }

    pub fn schedule(&self, method: Method) -> Schedule {
        match method {
            Method::De => self.de,
            Method::Cd => self.cd,
            Method::Bnn => self.bnn,
        }
    }
}

fn default_n_runs() -> usize {
    6
}

const REDUCED_BATCH: usize = 16;

/// The shift grids of the out-of-distribution sweeps.
pub fn default_ood_specs() -> Vec<OodSpec> {
    vec![
        OodSpec::shift_g(15.0, 17.0),
        OodSpec::shift_g(17.0, 20.0),
        OodSpec::shift_g(20.0, 25.0),
        OodSpec::shift_l(0.8, 1.2),
        OodSpec::shift_l(1.2, 1.6),
        OodSpec::shift_l(1.6, 2.4),
    ]
}

/// One experiment: a noise range, the methods to compare and the run seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub noise_range: Interval,
    pub methods: Vec<Method>,
    #[serde(default = "default_ood_specs")]
    pub ood_specs: Vec<OodSpec>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    /// Defaults to 1..=n_runs.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub reduced_scale: bool,
    /// Seed of the generated datasets; every run shares the same data.
    #[serde(default)]
    pub data_seed: u64,
    /// Replaces the scale implied by `reduced_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Scale>,
    #[serde(default)]
    pub settings: UqSettings,
}

impl ExperimentPlan {
    /// All three methods on the given noise range with `n_runs` seeds 1, 2, ...
    pub fn new(name: &str, noise_range: (f64, f64), n_runs: usize, reduced_scale: bool) -> Self {
        Self {
            name: name.to_string(),
            noise_range: Interval::new(noise_range.0, noise_range.1),
            methods: Method::ALL.to_vec(),
            ood_specs: default_ood_specs(),
            n_runs,
            seeds: (1..=n_runs as u64).collect(),
            reduced_scale,
            data_seed: 0,
            scale: None,
            settings: UqSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut plan: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if plan.seeds.is_empty() {
            plan.seeds = (1..=plan.n_runs as u64).collect();
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return bad(format!("plan name '{}' must be non-empty [A-Za-z0-9._-]", self.name));
        }
        let nr = self.noise_range;
        if !NOISE_RANGES.iter().any(|&(lo, hi)| lo == nr.lower && hi == nr.upper) {
            return bad(format!("noise_range {nr} must be one of {NOISE_RANGES:?}"));
        }
        if self.methods.is_empty() {
            return bad("at least one method required".into());
        }
        let mut sorted = self.methods.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.methods.len() {
            return bad("methods must be distinct".into());
        }
        if self.n_runs != self.seeds.len() || self.n_runs == 0 {
            return bad(format!("n_runs = {} but {} seeds given", self.n_runs, self.seeds.len()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let mut labels: Vec<String> = self.ood_specs.iter().map(OodSpec::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.ood_specs.len() {
            return bad("ood_specs must be distinct".into());
        }
        for spec in &self.ood_specs {
            spec.apply(&self.data_config()).validate()?;
        }
        let scale = self.scale();
        if scale.n_train == 0 || scale.n_test < crate::metrics::MIN_EVAL_SAMPLES || scale.n_ood < crate::metrics::MIN_EVAL_SAMPLES {
            return bad(format!(
                "need n_train >= 1 and at least {} test and ood rows",
                crate::metrics::MIN_EVAL_SAMPLES
            ));
        }
        for m in &self.methods {
            scale.schedule(*m).train_config(0).validate()?;
        }
        if self.settings.n_estimates < 2 {
            return bad("n_estimates must be at least 2".into());
        }
        self.data_config().validate()
    }

    pub fn scale(&self) -> Scale {
        match &self.scale {
            Some(s) => s.clone(),
            None if self.reduced_scale => Scale::reduced(),
            None => Scale::full(),
        }
    }

    /// Generator configuration of the training distribution.
    pub fn data_config(&self) -> PendulumConfig {
        PendulumConfig {
            period_noise_range: self.noise_range,
            seed: self.data_seed,
            ..PendulumConfig::default()
        }
    }

    /// Hash of everything that determines the results.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Effective<'a> {
            plan: &'a ExperimentPlan,
            scale: Scale,
        }
        config_hash(&Effective {
            plan: self,
            scale: self.scale(),
        })
    }

    /// Shifts every run seed, e.g. to draw fresh runs from the same plan.
    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }
}
