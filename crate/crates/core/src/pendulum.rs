//! Simulated single-pendulum measurements.
//!
//! Each sample mimics one lab measurement set: a mass, a release angle, one
//! noisy length reading and a handful of noisy period readings. The hidden
//! truth (`g_true`, `length_true`, `period_true`) and the per-sample relative
//! period noise `nu` are kept alongside for evaluation but never reach the
//! model input vector.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_decimal;

const FOUR_PI_SQ: f64 = 4.0 * PI * PI;

/// Closed interval `[lower, upper]`; uniform draws use the half-open `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lower + self.width() * u
    }

    fn check(&self, name: &str, allow_zero: bool) -> Result<()> {
        let ok_lower = if allow_zero {
            self.lower >= 0.0
        } else {
            self.lower > 0.0
        };
        if !(self.lower.is_finite() && self.upper.is_finite()) || !ok_lower || self.lower > self.upper
        {
            return Err(Error::InvalidConfig(format!(
                "{name} = ({}, {}) must satisfy 0 {} lower <= upper",
                self.lower,
                self.upper,
                if allow_zero { "<=" } else { "<" }
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    /// m/s²
    pub g_range: Interval,
    /// m
    pub l_range: Interval,
    /// kg
    pub mass_range: Interval,
    /// degrees
    pub angle_range: Interval,
    /// Relative period noise, drawn once per sample.
    pub period_noise_range: Interval,
    /// Relative noise on the single length reading.
    pub length_noise: f64,
    pub n_period_measurements: usize,
    pub seed: u64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            g_range: Interval::new(5.0, 15.0),
            l_range: Interval::new(0.2, 0.8),
            mass_range: Interval::new(0.5, 2.0),
            angle_range: Interval::new(1.0, 10.0),
            period_noise_range: Interval::new(0.01, 0.20),
            length_noise: 0.02,
            n_period_measurements: 10,
            seed: 0,
        }
    }
}

impl PendulumConfig {
    pub fn validate(&self) -> Result<()> {
        self.g_range.check("g_range", false)?;
        self.l_range.check("l_range", false)?;
        self.mass_range.check("mass_range", false)?;
        self.angle_range.check("angle_range", false)?;
        self.period_noise_range.check("period_noise_range", true)?;
        if self.period_noise_range.upper >= 1.0 {
            return Err(Error::InvalidConfig(
                "period_noise_range upper bound must be < 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.length_noise) {
            return Err(Error::InvalidConfig("length_noise must lie in [0, 1)".into()));
        }
        if self.n_period_measurements < 2 {
            return Err(Error::InvalidConfig(
                "n_period_measurements must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Number of values in the model input vector.
    pub fn input_dim(&self) -> usize {
        3 + self.n_period_measurements
    }

    pub fn from_toml_str(s: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumSample {
    pub mass: f64,
    pub angle: f64,
    pub length_measured: f64,
    pub period_measurements: Vec<f64>,
    pub g_true: f64,
    pub length_true: f64,
    pub period_true: f64,
    pub nu: f64,
}

impl PendulumSample {
    /// The model-visible inputs: mass, angle, measured length, then the period readings.
    pub fn inputs(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 + self.period_measurements.len());
        v.push(self.mass);
        v.push(self.angle);
        v.push(self.length_measured);
        v.extend_from_slice(&self.period_measurements);
        v
    }

    pub fn mean_period(&self) -> f64 {
        self.period_measurements.iter().sum::<f64>() / self.period_measurements.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    Ood,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    /// Draw g from the target range; L as in training.
    ShiftG,
    /// Draw L from the target range; g stays in the training range.
    ShiftLKeepG,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    pub kind: OodKind,
    pub target_range: Interval,
}

impl OodSpec {
    pub fn shift_g(lower: f64, upper: f64) -> Self {
        Self {
            kind: OodKind::ShiftG,
            target_range: Interval::new(lower, upper),
        }
    }

    pub fn shift_l(lower: f64, upper: f64) -> Self {
        Self {
            kind: OodKind::ShiftLKeepG,
            target_range: Interval::new(lower, upper),
        }
    }

    /// Short stable label, e.g. `ood_l_1.6_2.4`.
    pub fn label(&self) -> String {
        let k = match self.kind {
            OodKind::ShiftG => "g",
            OodKind::ShiftLKeepG => "l",
        };
        format!(
            "ood_{k}_{}_{}",
            self.target_range.lower, self.target_range.upper
        )
    }

    /// The configuration the shifted samples are drawn under.
    pub fn apply(&self, config: &PendulumConfig) -> PendulumConfig {
        let mut shifted = config.clone();
        match self.kind {
            OodKind::ShiftG => shifted.g_range = self.target_range,
            OodKind::ShiftLKeepG => shifted.l_range = self.target_range,
        }
        shifted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PendulumSample>,
    pub config: PendulumConfig,
    pub split_tag: SplitTag,
    pub ood: Option<OodSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Model inputs as an `n × input_dim` matrix.
    pub fn inputs(&self) -> Array2<f64> {
        samples_to_inputs(&self.samples)
    }

    pub fn targets(&self) -> Array1<f64> {
        self.samples.iter().map(|s| s.g_true).collect()
    }
}

pub fn samples_to_inputs(samples: &[PendulumSample]) -> Array2<f64> {
    let dim = samples.first().map_or(0, |s| 3 + s.period_measurements.len());
    let mut out = Array2::zeros((samples.len(), dim));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        for (dst, v) in row.iter_mut().zip(s.inputs()) {
            *dst = v;
        }
    }
    out
}

/// `T = 2π·sqrt(L/g)`.
pub fn true_period(length: f64, g: f64) -> Result<f64> {
    if !(length > 0.0 && g > 0.0) {
        return Err(Error::Domain(format!(
            "true_period requires L > 0 and g > 0, got L = {length}, g = {g}"
        )));
    }
    Ok(2.0 * PI * (length / g).sqrt())
}

/// `g = 4π²·L/T²`.
pub fn gravitational_accel(length: f64, period: f64) -> Result<f64> {
    if !(length > 0.0 && period > 0.0) {
        return Err(Error::Domain(format!(
            "gravitational_accel requires L > 0 and T > 0, got L = {length}, T = {period}"
        )));
    }
    Ok(FOUR_PI_SQ * length / (period * period))
}

fn positive_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, stdev: f64) -> f64 {
    if stdev == 0.0 {
        return mean;
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + stdev * z;
        if x > 0.0 {
            return x;
        }
    }
}

/// Draws one sample. The config is assumed valid (see [`PendulumConfig::validate`]).
pub fn sample_pendulum<R: Rng + ?Sized>(config: &PendulumConfig, rng: &mut R) -> PendulumSample {
    let g_true = config.g_range.sample(rng);
    let length_true = config.l_range.sample(rng);
    let nu = config.period_noise_range.sample(rng);
    let mass = config.mass_range.sample(rng);
    let angle = config.angle_range.sample(rng);
    let period_true = 2.0 * PI * (length_true / g_true).sqrt();
    let period_measurements = (0..config.n_period_measurements)
        .map(|_| positive_normal(rng, period_true, nu * period_true))
        .collect();
    let length_measured = positive_normal(rng, length_true, config.length_noise * length_true);
    PendulumSample {
        mass,
        angle,
        length_measured,
        period_measurements,
        g_true,
        length_true,
        period_true,
        nu,
    }
}

/// Counter-based substream for sample `index` under `seed`.
///
/// Every sample owns its own ChaCha stream, so serial and parallel generation
/// produce the same bits.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn generate_samples(config: &PendulumConfig, n: usize) -> Vec<PendulumSample> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_pendulum(config, &mut sample_rng(config.seed, i as u64)))
        .collect()
}

pub fn generate_dataset(config: &PendulumConfig, n: usize, split_tag: SplitTag) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    Ok(Dataset {
        samples: generate_samples(config, n),
        config: config.clone(),
        split_tag,
        ood: None,
    })
}

pub fn generate_ood_dataset(config: &PendulumConfig, spec: &OodSpec, n: usize) -> Result<Dataset> {
    spec.target_range.check("target_range", false)?;
    let shifted = spec.apply(config);
    let mut ds = generate_dataset(&shifted, n, SplitTag::Ood)?;
    ds.ood = Some(*spec);
    Ok(ds)
}

fn csv_header(n_periods: usize) -> Vec<String> {
    let mut h = vec!["mass".into(), "angle".into(), "length_measured".into()];
    h.extend((1..=n_periods).map(|i| format!("period_{i}")));
    h.extend(["g_true", "nu", "length_true", "period_true"].map(String::from));
    h
}

/// Writes samples as delimited text with a header row.
pub fn write_samples_csv(path: &Path, samples: &[PendulumSample]) -> Result<()> {
    let n_periods = samples.first().map_or(0, |s| s.period_measurements.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(csv_header(n_periods))
        .map_err(|e| Error::parse(path, e))?;
    for s in samples {
        let mut rec = vec![
            fmt_decimal(s.mass),
            fmt_decimal(s.angle),
            fmt_decimal(s.length_measured),
        ];
        rec.extend(s.period_measurements.iter().map(|&t| fmt_decimal(t)));
        rec.extend([s.g_true, s.nu, s.length_true, s.period_true].map(fmt_decimal));
        w.write_record(&rec).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<PendulumSample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let headers = r.headers().map_err(|e| Error::parse(path, e))?.clone();
    let n_periods = headers.iter().filter(|h| h.starts_with("period_") && *h != "period_true").count();
    if headers.iter().collect::<Vec<_>>() != csv_header(n_periods) {
        return Err(Error::parse(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, e))?;
        let tail = &vals[3 + n_periods..];
        out.push(PendulumSample {
            mass: vals[0],
            angle: vals[1],
            length_measured: vals[2],
            period_measurements: vals[3..3 + n_periods].to_vec(),
            g_true: tail[0],
            nu: tail[1],
            length_true: tail[2],
            period_true: tail[3],
        });
    }
    Ok(out)
}
