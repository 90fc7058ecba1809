use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pendulum_uq::error::Error;
use pendulum_uq::experiment::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_train, run_all, stored_plan, ExperimentPlan, Layout,
    RunEvaluation,
};
use pendulum_uq::io::read_text;

/// Pendulum benchmark for uncertainty quantification: generate → train → evaluate → report.
#[derive(Parser, Debug)]
#[command(name = "pendulum-uq", version)]
struct Cli {
    /// Experiment plan (TOML). Defaults to <out>/plan.toml, else the built-in plan.
    #[arg(long, global = true)]
    plan: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Use reduced-scale sizes and epochs.
    #[arg(long, global = true)]
    reduced: bool,

    /// Worker threads for concurrent training jobs (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Added to every run seed of the plan.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,

    /// Also render SVG figures in `report`/`run`.
    #[arg(long, global = true)]
    svg: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write train/validation/test and OOD datasets.
    Generate,
    /// Train one model bundle per (method, seed).
    Train,
    /// Predict on every dataset; write tables, metrics and the cross-run aggregate.
    Evaluate,
    /// Write plot-ready figure tables.
    Report,
    /// generate, train, evaluate and report in one go.
    Run,
}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_ARTIFACT: u8 = 3;

fn resolve_plan(cli: &Cli, layout: &Layout) -> pendulum_uq::error::Result<ExperimentPlan> {
    let mut plan = match &cli.plan {
        Some(path) => ExperimentPlan::from_toml_str(&read_text(path)?)?,
        None if layout.plan_file().exists() => stored_plan(layout)?,
        None => ExperimentPlan::new("default", (0.01, 0.20), 6, cli.reduced),
    };
    if cli.reduced {
        plan.reduced_scale = true;
    }
    plan = plan.with_seed_offset(cli.seed_offset);
    plan.validate()?;
    Ok(plan)
}

fn print_summary(evals: &[RunEvaluation]) {
    println!("{:<5} {:>5} {:<16} {:>9} {:>9} {:>10} {:>12}", "method", "seed", "dataset", "rmse", "pearson", "calib_err", "med_sig_ep");
    for e in evals {
        let m: std::collections::BTreeMap<String, f64> = e.metrics().into_iter().collect();
        println!(
            "{:<6} {:>4} {:<16} {:>9.4} {:>9.4} {:>10.4} {:>12.5}",
            e.method.to_string(),
            e.seed,
            e.dataset,
            m["rmse"],
            m["pearson_r"],
            m["max_abs_calibration_error"],
            m["median_sigma_ep"],
        );
    }
}

fn run(cli: &Cli) -> pendulum_uq::error::Result<()> {
    let layout = Layout::new(&cli.out);
    let plan = resolve_plan(cli, &layout)?;
    info!("plan '{}' (config {})", plan.name, &plan.config_hash()[..12]);
    match cli.command {
        Command::Generate => {
            let files = cmd_generate(&plan, &layout)?;
            println!("wrote {} datasets to {}", files.len(), layout.data_dir().display());
        }
        Command::Train => {
            let files = cmd_train(&plan, &layout)?;
            println!("wrote {} model bundles to {}", files.len(), layout.models_dir().display());
        }
        Command::Evaluate => print_summary(&cmd_evaluate(&plan, &layout)?),
        Command::Report => {
            let files = cmd_report(&plan, &layout, cli.svg)?;
            println!("wrote {} report files to {}", files.len(), layout.report_dir().display());
        }
        Command::Run => print_summary(&run_all(&plan, &layout, cli.svg)?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if e.is_missing_artifact() || matches!(e, Error::Integrity { .. }) {
        EXIT_ARTIFACT
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool is configured once");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
