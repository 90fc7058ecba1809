//! Plot-ready tables (and optional SVG sketches) built from evaluation output.
//!
//! * `fig1_comparisons_noise.csv` — predicted vs analytic relative uncertainty per test point.
//! * `fig2_ood.csv` — epistemic uncertainty per shift level; `fig2_ood_points.csv` per point.
//! * `fig3_calibration.csv` — reliability curves, one panel per L range.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::pipeline::{
    evaluation_labels, write_table_with_manifest, Layout, PREDICTION_COLUMNS, TEST,
};
use super::plan::ExperimentPlan;
use crate::error::{Error, Result};
use crate::io::{ensure_dir, fmt_decimal, write_atomic};
use crate::metrics::median;
use crate::pendulum::{OodKind, OodSpec};
use crate::uq::Method;

fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let vals = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| Error::parse(path, e)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let k = header.iter().position(|h| h == name).expect("known column");
    rows.iter().map(|r| r[k]).collect()
}

fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Where a dataset sits along its sweep.
fn level_of(plan: &ExperimentPlan, label: &str) -> (String, f64, f64) {
    match plan.ood_specs.iter().find(|s| s.label() == label) {
        Some(OodSpec { kind: OodKind::ShiftG, target_range }) => ("g".into(), target_range.lower, target_range.upper),
        Some(OodSpec { kind: OodKind::ShiftLKeepG, target_range }) => ("l".into(), target_range.lower, target_range.upper),
        None => {
            let c = plan.data_config();
            ("none".into(), c.l_range.lower, c.l_range.upper)
        }
    }
}

struct RunFiles {
    method: Method,
    seed: u64,
    label: String,
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    reliability: Vec<(f64, f64)>,
}

fn load_runs(plan: &ExperimentPlan, layout: &Layout) -> Result<Vec<RunFiles>> {
    let mut out = Vec::new();
    for &method in &plan.methods {
        for &seed in &plan.seeds {
            let dir = layout.run_eval_dir(method, seed);
            for label in evaluation_labels(plan) {
                let (header, rows) = read_columns(&dir.join(format!("{label}_predictions.csv")))?;
                if header != PREDICTION_COLUMNS {
                    return Err(Error::parse(dir.join(&label), "unexpected prediction columns"));
                }
                let (_, rel) = read_columns(&dir.join(format!("{label}_reliability.csv")))?;
                out.push(RunFiles {
                    method,
                    seed,
                    label,
                    header,
                    rows,
                    reliability: rel.into_iter().map(|r| (r[0], r[1])).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Writes the figure tables; with `svg`, also simple vector renderings.
pub fn cmd_report(plan: &ExperimentPlan, layout: &Layout, svg: bool) -> Result<Vec<PathBuf>> {
    let dir = layout.report_dir();
    ensure_dir(&dir)?;
    let runs = load_runs(plan, layout)?;
    let seed = plan.seeds[0];
    let noise = format!("{}-{}", plan.noise_range.lower, plan.noise_range.upper);
    let mut written = Vec::new();

    // Per-point relative uncertainties on the test set.
    let mut fig1 = Vec::new();
    for r in runs.iter().filter(|r| r.label == TEST) {
        let a = column(&r.header, &r.rows, "analytic_sigma_rel");
        let p = column(&r.header, &r.rows, "predicted_sigma_al_rel");
        for (a, p) in a.iter().zip(&p) {
            fig1.push(vec![
                fmt_decimal(*a),
                fmt_decimal(*p),
                r.method.to_string(),
                noise.clone(),
                r.seed.to_string(),
            ]);
        }
    }
    let path = dir.join("fig1_comparisons_noise.csv");
    write_table_with_manifest(
        &path,
        &["analytic_sigma_rel", "predicted_sigma_rel", "method", "noise_range", "seed"],
        &fig1,
        plan,
        seed,
    )?;
    written.push(path);

    // Epistemic uncertainty along each sweep.
    let mut fig2 = Vec::new();
    let mut fig2_points = Vec::new();
    for r in &runs {
        let (shift, lo, hi) = level_of(plan, &r.label);
        let ep = column(&r.header, &r.rows, "sigma_ep");
        let g_true = column(&r.header, &r.rows, "g_true");
        let g_hat = column(&r.header, &r.rows, "g_hat");
        let abs_err: Vec<f64> = g_hat.iter().zip(&g_true).map(|(h, t)| (h - t).abs()).collect();
        fig2.push(vec![
            r.method.to_string(),
            r.seed.to_string(),
            r.label.clone(),
            shift.clone(),
            fmt_decimal(lo),
            fmt_decimal(hi),
            fmt_decimal(median(&ep)),
            fmt_decimal(quantile(&ep, 0.25)),
            fmt_decimal(quantile(&ep, 0.75)),
            fmt_decimal(median(&abs_err)),
        ]);
        if r.seed == seed {
            for ((t, h), e) in g_true.iter().zip(&g_hat).zip(&ep) {
                fig2_points.push(vec![
                    r.method.to_string(),
                    r.label.clone(),
                    fmt_decimal(*t),
                    fmt_decimal(*h),
                    fmt_decimal(*e),
                ]);
            }
        }
    }
    let path = dir.join("fig2_ood.csv");
    write_table_with_manifest(
        &path,
        &[
            "method",
            "seed",
            "dataset",
            "shift",
            "range_lower",
            "range_upper",
            "median_sigma_ep",
            "q25_sigma_ep",
            "q75_sigma_ep",
            "median_abs_error",
        ],
        &fig2,
        plan,
        seed,
    )?;
    written.push(path);
    let path = dir.join("fig2_ood_points.csv");
    write_table_with_manifest(&path, &["method", "dataset", "g_true", "g_hat", "sigma_ep"], &fig2_points, plan, seed)?;
    written.push(path);

    // Reliability diagrams, one panel per L range (in-distribution first).
    let mut fig3 = Vec::new();
    for r in &runs {
        let (shift, lo, hi) = level_of(plan, &r.label);
        if shift == "g" {
            continue;
        }
        let panel = format!("L_{lo}_{hi}");
        for (n, e) in &r.reliability {
            fig3.push(vec![
                panel.clone(),
                r.method.to_string(),
                r.seed.to_string(),
                fmt_decimal(*n),
                fmt_decimal(*e),
            ]);
        }
    }
    let path = dir.join("fig3_calibration.csv");
    write_table_with_manifest(&path, &["panel", "method", "seed", "nominal", "empirical"], &fig3, plan, seed)?;
    written.push(path);

    if svg {
        written.extend(render_svgs(plan, &runs, &dir)?);
    }
    info!("report written to {}", dir.display());
    Ok(written)
}

// ---------------------------------------------------------------------- svg

enum Style {
    Line,
    Points,
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    style: Style,
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#7f7f7f"];

fn render_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], bounds: Option<(f64, f64, f64, f64)>) -> String {
    let (w, h, m) = (420.0, 320.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (x0, x1, y0, y1) = bounds.unwrap_or_else(|| {
        all.fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(a, b, c, d), &(x, y)| {
            (a.min(x), b.max(x), c.min(y), d.max(y))
        })
    });
    let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 1.5 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 1.5 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        sx(x0), sy(y1), sx(x0), sy(y0), sx(x1), sy(y0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#, h / 2.0, h / 2.0);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, sx(v), sy(y0) + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, sx(x0) - 4.0, sy(v) + 4.0);
    }
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        match ser.style {
            Style::Line => {
                let d: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
            }
            Style::Points => {
                for &(x, y) in &ser.points {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{color}" fill-opacity="0.5"/>"#, sx(x), sy(y));
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            m + 8.0,
            30.0 + 13.0 * k as f64,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn runs_for<'a>(runs: &'a [RunFiles], seed: u64, label: &'a str) -> impl Iterator<Item = &'a RunFiles> + 'a {
    runs.iter().filter(move |r| r.seed == seed && r.label == label)
}

fn render_svgs(plan: &ExperimentPlan, runs: &[RunFiles], dir: &Path) -> Result<Vec<PathBuf>> {
    let seed = plan.seeds[0];
    let mut written = Vec::new();
    let mut save = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };

    let fig1: Vec<Series> = runs_for(runs, seed, TEST)
        .map(|r| Series {
            name: r.method.to_string(),
            points: column(&r.header, &r.rows, "analytic_sigma_rel")
                .into_iter()
                .zip(column(&r.header, &r.rows, "predicted_sigma_al_rel"))
                .collect(),
            style: Style::Points,
        })
        .collect();
    save(
        "fig1_comparisons_noise.svg",
        render_plot("relative uncertainty, test set", "analytic", "predicted", &fig1, None),
    )?;

    for shift in ["g", "l"] {
        let mut by_method: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.seed == seed) {
            let (s, lo, hi) = level_of(plan, &r.label);
            if s == shift || s == "none" {
                let mid = if s == "none" && shift == "g" {
                    let c = plan.data_config();
                    0.5 * (c.g_range.lower + c.g_range.upper)
                } else {
                    0.5 * (lo + hi)
                };
                by_method
                    .entry(r.method)
                    .or_default()
                    .push((mid, median(&column(&r.header, &r.rows, "sigma_ep"))));
            }
        }
        let series: Vec<Series> = by_method
            .into_iter()
            .map(|(m, mut pts)| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: m.to_string(),
                    points: pts,
                    style: Style::Line,
                }
            })
            .collect();
        save(
            &format!("fig2_ood_{shift}.svg"),
            render_plot(
                &format!("median epistemic uncertainty vs {shift}"),
                &format!("{shift} range midpoint"),
                "median sigma_ep",
                &series,
                None,
            ),
        )?;
    }

    for label in evaluation_labels(plan) {
        let (shift, lo, hi) = level_of(plan, &label);
        if shift == "g" {
            continue;
        }
        let mut series: Vec<Series> = runs_for(runs, seed, &label)
            .map(|r| Series {
                name: r.method.to_string(),
                points: r.reliability.clone(),
                style: Style::Line,
            })
            .collect();
        series.push(Series {
            name: "ideal".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            style: Style::Line,
        });
        save(
            &format!("fig3_calibration_L_{lo}_{hi}.svg"),
            render_plot(&format!("reliability, L in ({lo}, {hi})"), "nominal", "empirical", &series, Some((0.0, 1.0, 0.0, 1.0))),
        )?;
    }
    Ok(written)
}
