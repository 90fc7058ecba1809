//! generate → train → evaluate, with every artifact written atomically next
//! to a manifest naming the plan, seed and configuration hash.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::ExperimentPlan;
use crate::error::{Error, Result};
use crate::io::{
    config_hash, derive_seed, ensure_dir, fmt_decimal, manifest_path, read_json, read_text, write_atomic,
    write_json, write_table,
};
use crate::metrics::{
    accuracy_metrics, compare_uncertainties, median, nominal_grid, reliability_curve, summarize_epistemic,
    AccuracyMetrics, EpistemicLevel, ReliabilityCurve, UncertaintyComparison, CONSTANT_UNCERTAINTY_THRESHOLD,
};
use crate::nn::{TrainConfig, TrainHistory};
use crate::pendulum::{
    generate_dataset, generate_ood_dataset, read_samples_csv, write_samples_csv, Dataset, OodSpec,
    PendulumConfig, SplitTag,
};
use crate::uq::{train_model, Method, PredictiveSummary, UqModel, UqSettings};

/// Directory layout of one experiment.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn plan_file(&self) -> PathBuf {
        self.root.join("plan.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn dataset_file(&self, label: &str) -> PathBuf {
        self.data_dir().join(format!("{label}.csv"))
    }

    pub fn model_file(&self, method: Method, seed: u64) -> PathBuf {
        self.models_dir().join(format!("{method}_seed{seed}.json"))
    }

    pub fn train_log_file(&self, method: Method, seed: u64) -> PathBuf {
        self.models_dir().join(format!("{method}_seed{seed}_log.csv"))
    }

    pub fn run_eval_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.eval_dir().join(format!("{method}_seed{seed}"))
    }
}

/// Sidecar of every data, evaluation and report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: usize,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(&manifest_path(path), manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(&manifest_path(path))
}

/// Writes a table and its manifest.
pub fn write_table_with_manifest(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
    plan: &ExperimentPlan,
    seed: u64,
) -> Result<()> {
    write_table(path, header, rows)?;
    write_manifest(
        path,
        &Manifest {
            plan: plan.name.clone(),
            seed,
            config_hash: plan.config_hash(),
            rows: rows.len(),
        },
    )
}

// ------------------------------------------------------------------ datasets

/// Everything that determines one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSpec {
    pub label: String,
    pub split: SplitTag,
    pub config: PendulumConfig,
    pub n: usize,
    pub ood: Option<OodSpec>,
}

impl DatasetSpec {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn generate(&self) -> Result<Dataset> {
        match &self.ood {
            Some(spec) => generate_ood_dataset(&self.config, spec, self.n),
            None => generate_dataset(&self.config, self.n, self.split),
        }
    }
}

pub const TRAIN: &str = "train";
pub const VALIDATION: &str = "validation";
pub const TEST: &str = "test";

/// Train, validation, test and one set per OOD spec; each split has its own seed.
pub fn dataset_specs(plan: &ExperimentPlan) -> Vec<DatasetSpec> {
    let scale = plan.scale();
    let base = plan.data_config();
    let with_seed = |label: &str| PendulumConfig {
        seed: derive_seed(plan.data_seed, label),
        ..base.clone()
    };
    let mut specs = vec![
        DatasetSpec {
            label: TRAIN.into(),
            split: SplitTag::Train,
            config: with_seed(TRAIN),
            n: scale.n_train,
            ood: None,
        },
        DatasetSpec {
            label: VALIDATION.into(),
            split: SplitTag::Validation,
            config: with_seed(VALIDATION),
            n: scale.n_validation,
            ood: None,
        },
        DatasetSpec {
            label: TEST.into(),
            split: SplitTag::Test,
            config: with_seed(TEST),
            n: scale.n_test,
            ood: None,
        },
    ];
    for spec in &plan.ood_specs {
        let label = spec.label();
        specs.push(DatasetSpec {
            config: with_seed(&label),
            label,
            split: SplitTag::Ood,
            n: scale.n_ood,
            ood: Some(*spec),
        });
    }
    specs.retain(|s| s.n > 0);
    specs
}

fn spec_for(plan: &ExperimentPlan, label: &str) -> Result<DatasetSpec> {
    dataset_specs(plan)
        .into_iter()
        .find(|s| s.label == label)
        .ok_or_else(|| Error::InvalidConfig(format!("plan has no dataset '{label}'")))
}

pub fn cmd_generate(plan: &ExperimentPlan, layout: &Layout) -> Result<Vec<PathBuf>> {
    plan.validate()?;
    ensure_dir(&layout.data_dir())?;
    write_atomic(&layout.plan_file(), plan.to_toml_string().as_bytes())?;
    let mut written = Vec::new();
    for spec in dataset_specs(plan) {
        let path = layout.dataset_file(&spec.label);
        let data = spec.generate()?;
        let tmp = path.with_extension("csv.partial");
        write_samples_csv(&tmp, &data.samples)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        write_manifest(
            &path,
            &Manifest {
                plan: plan.name.clone(),
                seed: spec.config.seed,
                config_hash: spec.hash(),
                rows: data.len(),
            },
        )?;
        info!("wrote {} ({} rows)", path.display(), data.len());
        written.push(path);
    }
    Ok(written)
}

/// Reads a generated dataset, refusing files produced under another configuration.
pub fn load_dataset(plan: &ExperimentPlan, layout: &Layout, label: &str) -> Result<Dataset> {
    let spec = spec_for(plan, label)?;
    let path = layout.dataset_file(label);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let manifest = read_manifest(&path)?;
    let expected = spec.hash();
    if manifest.config_hash != expected {
        return Err(Error::Integrity {
            path,
            reason: format!(
                "config hash {} does not match the plan's {} (regenerate the data)",
                manifest.config_hash, expected
            ),
        });
    }
    let samples = read_samples_csv(&path)?;
    if samples.len() != manifest.rows {
        return Err(Error::Integrity {
            path,
            reason: format!("{} rows, manifest says {}", samples.len(), manifest.rows),
        });
    }
    Ok(Dataset {
        samples,
        config: if let Some(o) = &spec.ood {
            o.apply(&spec.config)
        } else {
            spec.config.clone()
        },
        split_tag: spec.split,
        ood: spec.ood,
    })
}

// -------------------------------------------------------------------- train

/// A trained model with the provenance needed to evaluate it safely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub plan: String,
    pub plan_hash: String,
    pub method: Method,
    pub seed: u64,
    /// Config hash of the training set the model was fitted on.
    pub data_hash: String,
    pub train_config: TrainConfig,
    pub settings: UqSettings,
    pub model: UqModel,
}

fn job_seed(method: Method, seed: u64) -> u64 {
    derive_seed(seed, method.as_str())
}

fn jobs(plan: &ExperimentPlan) -> Vec<(Method, u64)> {
    plan.methods
        .iter()
        .flat_map(|&m| plan.seeds.iter().map(move |&s| (m, s)))
        .collect()
}

fn history_rows(model: &UqModel) -> Vec<Vec<String>> {
    let histories: Vec<&TrainHistory> = match model {
        UqModel::DeepEnsemble(de) => de.histories.iter().collect(),
        UqModel::ConcreteDropout(m) => m.history.iter().collect(),
        UqModel::Bnn(m) => m.history.iter().collect(),
    };
    let mut rows = Vec::new();
    for (member, h) in histories.iter().enumerate() {
        rows.push(vec![
            member.to_string(),
            "0".into(),
            fmt_decimal(h.initial_loss),
            String::new(),
            String::new(),
        ]);
        for e in &h.epochs {
            rows.push(vec![
                member.to_string(),
                e.epoch.to_string(),
                fmt_decimal(e.loss),
                fmt_decimal(e.nll),
                fmt_decimal(e.penalty),
            ]);
        }
    }
    rows
}

fn train_job(plan: &ExperimentPlan, layout: &Layout, train: &Dataset, data_hash: &str, method: Method, seed: u64) -> Result<PathBuf> {
    let path = layout.model_file(method, seed);
    let plan_hash = plan.config_hash();
    if let Ok(existing) = read_json::<ModelBundle>(&path) {
        if existing.plan_hash == plan_hash && existing.data_hash == data_hash && existing.model.is_trained() {
            info!("{method} seed {seed}: reusing {}", path.display());
            return Ok(path);
        }
    }
    let config = plan.scale().schedule(method).train_config(job_seed(method, seed));
    info!("{method} seed {seed}: training ({} epochs)", config.epochs);
    let model = train_model(method, train, &config, &plan.settings).map_err(|e| Error::JobFailed {
        method: method.to_string(),
        seed,
        source: Box::new(e),
    })?;
    write_table_with_manifest(
        &layout.train_log_file(method, seed),
        &["member", "epoch", "loss", "nll", "penalty"],
        &history_rows(&model),
        plan,
        seed,
    )?;
    // The bundle is written last and atomically: its presence marks completion.
    write_json(
        &path,
        &ModelBundle {
            plan: plan.name.clone(),
            plan_hash,
            method,
            seed,
            data_hash: data_hash.to_string(),
            train_config: config,
            settings: plan.settings.clone(),
            model,
        },
    )?;
    info!("{method} seed {seed}: wrote {}", path.display());
    Ok(path)
}

/// Trains one bundle per (method, seed); jobs run concurrently on the current rayon pool.
pub fn cmd_train(plan: &ExperimentPlan, layout: &Layout) -> Result<Vec<PathBuf>> {
    plan.validate()?;
    ensure_dir(&layout.models_dir())?;
    let train = load_dataset(plan, layout, TRAIN)?;
    let data_hash = spec_for(plan, TRAIN)?.hash();
    jobs(plan)
        .into_par_iter()
        .map(|(method, seed)| train_job(plan, layout, &train, &data_hash, method, seed))
        .collect()
}

pub fn load_bundle(plan: &ExperimentPlan, layout: &Layout, method: Method, seed: u64) -> Result<ModelBundle> {
    let path = layout.model_file(method, seed);
    let bundle: ModelBundle = read_json(&path)?;
    let data_hash = spec_for(plan, TRAIN)?.hash();
    if bundle.method != method || bundle.seed != seed {
        return Err(Error::Integrity {
            path,
            reason: format!("holds {} seed {}", bundle.method, bundle.seed),
        });
    }
    if bundle.data_hash != data_hash {
        return Err(Error::Integrity {
            path,
            reason: "trained on a different dataset than the plan describes".into(),
        });
    }
    let expected = plan.scale().schedule(method).train_config(job_seed(method, seed));
    if bundle.train_config != expected || bundle.settings != plan.settings {
        return Err(Error::Integrity {
            path,
            reason: "trained with a different schedule or settings than the plan describes".into(),
        });
    }
    if !bundle.model.is_trained() {
        return Err(Error::Integrity {
            path,
            reason: "model is not trained".into(),
        });
    }
    Ok(bundle)
}

// ----------------------------------------------------------------- evaluate

/// One model evaluated on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEvaluation {
    pub method: Method,
    pub seed: u64,
    pub dataset: String,
    pub ood: Option<OodSpec>,
    pub predictions: Vec<PredictiveSummary>,
    pub truths: Vec<f64>,
    pub comparison: UncertaintyComparison,
    pub reliability: ReliabilityCurve,
    pub accuracy: AccuracyMetrics,
    pub epistemic: EpistemicLevel,
    /// Learned rate of each concrete dropout layer.
    pub dropout_probabilities: Option<Vec<f64>>,
}

impl RunEvaluation {
    /// Scalar summary in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let ep: Vec<f64> = self.predictions.iter().map(|p| p.sigma_ep).collect();
        let al: Vec<f64> = self.predictions.iter().map(|p| p.sigma_al).collect();
        let g_hat_max = self.predictions.iter().map(|p| p.g_hat).fold(f64::NEG_INFINITY, f64::max);
        let mut m = vec![
            ("n_samples".to_string(), self.predictions.len() as f64),
            ("rmse".into(), self.accuracy.rmse),
            ("mae".into(), self.accuracy.mae),
            ("mean_signed_error".into(), self.accuracy.mean_signed_error),
            ("max_abs_calibration_error".into(), self.reliability.max_abs_deviation()),
            ("max_coverage_deficit".into(), self.reliability.max_deficit()),
            ("median_sigma_al".into(), median(&al)),
            ("median_sigma_ep".into(), median(&ep)),
            ("max_g_hat".into(), g_hat_max),
            ("pearson_r".into(), self.comparison.pearson_r.unwrap_or(f64::NAN)),
            ("mean_predicted_sigma_rel".into(), self.comparison.mean_predicted_sigma_rel),
            ("stdev_predicted_sigma_rel".into(), self.comparison.stdev_predicted_sigma_rel),
            ("constant_statistic".into(), self.comparison.constant_statistic),
            (
                "constant_flag".into(),
                if self.comparison.constant_prediction_flag { 1.0 } else { 0.0 },
            ),
        ];
        if let Some(ps) = &self.dropout_probabilities {
            for (k, p) in ps.iter().enumerate() {
                m.push((format!("dropout_p_layer{}", k + 2), *p));
            }
        }
        m
    }
}

fn evaluate_one(bundle: &ModelBundle, data: &Dataset, label: &str, plan: &ExperimentPlan) -> Result<RunEvaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        bundle.seed,
        &format!("eval/{}/{label}", bundle.method),
    ));
    let predictions = bundle
        .model
        .predict_batch(data.inputs().view(), bundle.settings.n_estimates, &mut rng)?;
    let truths: Vec<f64> = data.samples.iter().map(|s| s.g_true).collect();
    let g_hat: Vec<f64> = predictions.iter().map(|p| p.g_hat).collect();
    let comparison = compare_uncertainties(
        &predictions,
        &data.samples,
        plan.data_config().length_noise,
        CONSTANT_UNCERTAINTY_THRESHOLD,
    )?;
    Ok(RunEvaluation {
        method: bundle.method,
        seed: bundle.seed,
        dataset: label.to_string(),
        ood: data.ood,
        reliability: reliability_curve(&predictions, &truths, &nominal_grid())?,
        accuracy: accuracy_metrics(&g_hat, &truths)?,
        epistemic: summarize_epistemic(data, &predictions),
        dropout_probabilities: match &bundle.model {
            UqModel::ConcreteDropout(cd) => Some(cd.dropout_probabilities()),
            _ => None,
        },
        comparison,
        predictions,
        truths,
    })
}

fn write_run_files(ev: &RunEvaluation, layout: &Layout, plan: &ExperimentPlan, nu: &[f64]) -> Result<()> {
    let dir = layout.run_eval_dir(ev.method, ev.seed);
    ensure_dir(&dir)?;
    let rows: Vec<Vec<String>> = ev
        .predictions
        .iter()
        .zip(&ev.comparison.records)
        .zip(nu)
        .map(|((p, r), nu)| {
            [
                r.g_true,
                p.g_hat,
                p.sigma_al,
                p.sigma_ep,
                p.sigma_pr,
                r.analytic_g,
                r.analytic_sigma_rel,
                r.predicted_sigma_al_rel,
                r.predicted_sigma_ep_rel,
                *nu,
            ]
            .map(fmt_decimal)
            .to_vec()
        })
        .collect();
    write_table_with_manifest(
        &dir.join(format!("{}_predictions.csv", ev.dataset)),
        &PREDICTION_COLUMNS,
        &rows,
        plan,
        ev.seed,
    )?;
    let rel: Vec<Vec<String>> = ev
        .reliability
        .nominal_coverages
        .iter()
        .zip(&ev.reliability.empirical_coverages)
        .map(|(n, e)| vec![fmt_decimal(*n), fmt_decimal(*e)])
        .collect();
    write_table_with_manifest(
        &dir.join(format!("{}_reliability.csv", ev.dataset)),
        &["nominal", "empirical"],
        &rel,
        plan,
        ev.seed,
    )?;
    let metrics: Vec<Vec<String>> = ev
        .metrics()
        .into_iter()
        .map(|(k, v)| vec![k, fmt_decimal(v)])
        .collect();
    write_table_with_manifest(
        &dir.join(format!("{}_metrics.csv", ev.dataset)),
        &["metric", "value"],
        &metrics,
        plan,
        ev.seed,
    )
}

pub const PREDICTION_COLUMNS: [&str; 10] = [
    "g_true",
    "g_hat",
    "sigma_al",
    "sigma_ep",
    "sigma_pr",
    "analytic_g",
    "analytic_sigma_rel",
    "predicted_sigma_al_rel",
    "predicted_sigma_ep_rel",
    "nu",
];

/// Labels evaluated for every model: the test set, then each OOD set.
pub fn evaluation_labels(plan: &ExperimentPlan) -> Vec<String> {
    std::iter::once(TEST.to_string())
        .chain(plan.ood_specs.iter().map(OodSpec::label))
        .collect()
}

/// Sample stdev; NaN for fewer than two values.
fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn write_aggregate(evals: &[RunEvaluation], layout: &Layout, plan: &ExperimentPlan) -> Result<()> {
    let mut rows = Vec::new();
    for method in &plan.methods {
        for label in evaluation_labels(plan) {
            let runs: Vec<&RunEvaluation> = evals
                .iter()
                .filter(|e| e.method == *method && e.dataset == label)
                .collect();
            let Some(first) = runs.first() else { continue };
            for (k, (name, _)) in first.metrics().iter().enumerate() {
                let values: Vec<f64> = runs.iter().map(|r| r.metrics()[k].1).collect();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                rows.push(vec![
                    method.to_string(),
                    label.clone(),
                    name.clone(),
                    fmt_decimal(mean),
                    fmt_decimal(stdev(&values)),
                    values.len().to_string(),
                ]);
            }
        }
    }
    write_table_with_manifest(
        &layout.eval_dir().join("aggregate.csv"),
        &["method", "dataset", "metric", "mean", "stdev", "n_runs"],
        &rows,
        plan,
        plan.seeds[0],
    )
}

/// Evaluates every bundle on the test and OOD sets and writes per-run and
/// cross-run tables.
pub fn cmd_evaluate(plan: &ExperimentPlan, layout: &Layout) -> Result<Vec<RunEvaluation>> {
    plan.validate()?;
    ensure_dir(&layout.eval_dir())?;
    let labels = evaluation_labels(plan);
    let datasets: Vec<Dataset> = labels
        .iter()
        .map(|l| load_dataset(plan, layout, l))
        .collect::<Result<_>>()?;
    let per_job: Vec<Vec<RunEvaluation>> = jobs(plan)
        .into_par_iter()
        .map(|(method, seed)| {
            let bundle = load_bundle(plan, layout, method, seed)?;
            labels
                .iter()
                .zip(&datasets)
                .map(|(label, data)| {
                    let ev = evaluate_one(&bundle, data, label, plan)?;
                    let nu: Vec<f64> = data.samples.iter().map(|s| s.nu).collect();
                    write_run_files(&ev, layout, plan, &nu)?;
                    Ok(ev)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let evals: Vec<RunEvaluation> = per_job.into_iter().flatten().collect();
    write_aggregate(&evals, layout, plan)?;
    info!("evaluated {} (method, seed, dataset) combinations", evals.len());
    Ok(evals)
}

/// The plan stored by `generate`, for verbs invoked without `--plan`.
pub fn stored_plan(layout: &Layout) -> Result<ExperimentPlan> {
    ExperimentPlan::from_toml_str(&read_text(&layout.plan_file())?)
}
