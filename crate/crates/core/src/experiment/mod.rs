//! End-to-end driver: generate → train → evaluate → report.
//!
//! ```text
//! <out>/plan.toml
//! <out>/data/{train,validation,test,ood_*}.csv      (+ .manifest.json)
//! <out>/models/<method>_seed<k>.json                 model bundle
//! <out>/models/<method>_seed<k>_log.csv              per-epoch losses
//! <out>/eval/<method>_seed<k>/<dataset>_{predictions,reliability,metrics}.csv
//! <out>/eval/aggregate.csv                           mean/stdev over runs
//! <out>/report/fig{1,2,3}_*.csv                      (+ optional .svg)
//! ```

pub mod pipeline;
pub mod plan;
pub mod report;

use log::info;

pub use pipeline::{
    cmd_evaluate, cmd_generate, cmd_train, dataset_specs, load_bundle, load_dataset, stored_plan,
    DatasetSpec, Layout, Manifest, ModelBundle, RunEvaluation,
};
pub use plan::{default_ood_specs, ExperimentPlan, Scale, Schedule, NOISE_RANGES};
pub use report::cmd_report;

use crate::error::Result;

/// All four stages in order; returns the evaluations.
pub fn run_all(plan: &ExperimentPlan, layout: &Layout, svg: bool) -> Result<Vec<RunEvaluation>> {
    cmd_generate(plan, layout)?;
    cmd_train(plan, layout)?;
    let evals = cmd_evaluate(plan, layout)?;
    cmd_report(plan, layout, svg)?;
    info!("plan '{}' complete", plan.name);
    Ok(evals)
}
