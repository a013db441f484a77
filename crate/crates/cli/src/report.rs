//! Report emission: summary CSV/JSON and minimal deterministic SVG plots.

use std::fs;
use std::path::Path;

use synlab_core::curriculum::StageLog;
use synlab_core::error::{Error, Result};
use synlab_core::eval::{BatteryOutcome, MetricsReport};
use synlab_core::io;

use crate::pipeline::metrics_to_csv;

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n\
         <rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\">{title}</text>\n",
        PLOT_W / 2.0
    )
}

fn axes(xlabel: &str, ylabel: &str) -> String {
    let x0 = MARGIN;
    let y0 = PLOT_H - MARGIN;
    let x1 = PLOT_W - 16.0;
    let y1 = 32.0;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">{xlabel}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\" transform=\"rotate(-90 14 {})\">{ylabel}</text>\n",
        (x0 + x1) / 2.0,
        PLOT_H - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    )
}

/// Deterministic polyline chart over one or more named series.
pub fn svg_line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let mut svg = svg_header(title);
    svg.push_str(&axes(xlabel, ylabel));
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if !points.is_empty() {
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in &points {
            xmin = xmin.min(*x);
            xmax = xmax.max(*x);
            ymin = ymin.min(*y);
            ymax = ymax.max(*y);
        }
        if xmax == xmin {
            xmax = xmin + 1.0;
        }
        if ymax == ymin {
            ymax = ymin + 1.0;
        }
        let sx = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (PLOT_W - MARGIN - 16.0);
        let sy = |y: f64| (PLOT_H - MARGIN) - (y - ymin) / (ymax - ymin) * (PLOT_H - MARGIN - 32.0);
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = colors[i % colors.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| format!("{},{}", fmt(sx(*x)), fmt(sy(*y))))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" fill=\"{color}\">{name}</text>\n",
                PLOT_W - MARGIN - 90.0,
                40.0 + 12.0 * i as f64
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"monospace\" font-size=\"9\">{} .. {}</text>\n",
            PLOT_H - MARGIN + 14.0,
            fmt(xmin),
            fmt(xmax)
        ));
        svg.push_str(&format!(
            "<text x=\"4\" y=\"36\" font-family=\"monospace\" font-size=\"9\">{}</text>\n",
            fmt(ymax)
        ));
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{}\" font-family=\"monospace\" font-size=\"9\">{}</text>\n",
            PLOT_H - MARGIN,
            fmt(ymin)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Deterministic bar chart.
pub fn svg_bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let mut svg = svg_header(title);
    svg.push_str(&axes("", ylabel));
    if !bars.is_empty() {
        let ymax = bars.iter().map(|(_, v)| *v).fold(0.0f64, f64::max).max(1e-9);
        let span = PLOT_W - MARGIN - 16.0;
        let bw = span / bars.len() as f64;
        for (i, (name, v)) in bars.iter().enumerate() {
            let h = (v / ymax) * (PLOT_H - MARGIN - 32.0);
            let x = MARGIN + i as f64 * bw + 0.15 * bw;
            let y = (PLOT_H - MARGIN) - h;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\"/>\n",
                fmt(x),
                fmt(y),
                fmt(0.7 * bw),
                fmt(h)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"8\" transform=\"rotate(-45 {} {})\">{name}</text>\n",
                fmt(x + 0.35 * bw),
                fmt(PLOT_H - MARGIN + 24.0),
                fmt(x + 0.35 * bw),
                fmt(PLOT_H - MARGIN + 24.0)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"8\">{}</text>\n",
                fmt(x + 0.35 * bw),
                fmt(y - 3.0),
                fmt(*v)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Assemble the report for a completed run. All content is composed before
/// any file is written; missing inputs abort with the absent stages named.
pub fn emit_report(run_dir: &Path) -> Result<Vec<String>> {
    let metrics_path = run_dir.join("eval/metrics.json");
    let stages_path = run_dir.join("train/stages.jsonl");
    let mut missing = Vec::new();
    if !metrics_path.exists() {
        missing.push("evaluate (eval/metrics.json)");
    }
    if !stages_path.exists() {
        missing.push("curriculum-train (train/stages.jsonl)");
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "cannot emit report; missing stages: {}",
            missing.join(", ")
        )));
    }
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&metrics_path)?)
        .map_err(|e| Error::invalid(format!("bad metrics.json: {e}")))?;
    let logs: Vec<StageLog> = fs::read_to_string(&stages_path)?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("bad stage log: {e}"))))
        .collect::<Result<_>>()?;

    // accuracy-vs-stage from the training trace.
    let acc_series: Vec<(f64, f64)> = logs
        .iter()
        .enumerate()
        .map(|(i, l)| (i as f64, l.train.accuracy))
        .collect();
    let accuracy_svg = svg_line_chart(
        "training accuracy by stage",
        "stage",
        "accuracy",
        &[("train".to_string(), acc_series)],
    );

    // fidelity-vs-lambda from the scored spectrum (mean per level).
    let fidelity_svg = {
        let manifest = run_dir.join("spectrum/manifest.kv");
        let dssp = run_dir.join("spectrum/spectrum.dssp");
        if manifest.exists() && dssp.exists() {
            let pairs = io::kv_parse(&fs::read_to_string(&manifest)?)?;
            let find = |k: &str| pairs.iter().find(|(pk, _)| pk == k).map(|(_, v)| v.clone());
            let levels: Vec<f64> = find("grid")
                .unwrap_or_default()
                .split(',')
                .filter_map(|s| s.trim().parse().ok())
                .collect();
            let height: usize = find("height").and_then(|v| v.parse().ok()).unwrap_or(0);
            let width: usize = find("width").and_then(|v| v.parse().ok()).unwrap_or(0);
            let entries = io::load_spectrum(&dssp, height, width, &levels, &|_| Some(0))?;
            let mut series = Vec::new();
            for (idx, &lambda) in levels.iter().enumerate() {
                let scores: Vec<f64> = entries
                    .iter()
                    .filter(|e| e.lambda_index == idx)
                    .map(|e| e.fidelity as f64)
                    .collect();
                if !scores.is_empty() {
                    series.push((lambda, scores.iter().sum::<f64>() / scores.len() as f64));
                }
            }
            Some(svg_line_chart(
                "mean fidelity by guidance level",
                "lambda",
                "fidelity",
                &[("fidelity".to_string(), series)],
            ))
        } else {
            None
        }
    };

    // Optional ablation bars.
    let ablation_svg = {
        let summary = run_dir.join("ablation/summary.csv");
        if summary.exists() {
            let text = fs::read_to_string(&summary)?;
            let mut bars = Vec::new();
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() >= 4 && cols[1] == "accuracy_all" {
                    if let Ok(v) = cols[2].parse::<f64>() {
                        bars.push((cols[0].to_string(), v));
                    }
                }
            }
            Some(svg_bar_chart("ablation: all-class accuracy", "accuracy", &bars))
        } else {
            None
        }
    };

    let summary_csv = metrics_to_csv(&report);
    let summary_json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::invalid(e.to_string()))?;

    // Everything composed; now write.
    let report_dir = run_dir.join("report");
    fs::create_dir_all(&report_dir)?;
    let mut written = Vec::new();
    let mut write = |name: &str, content: &str| -> Result<()> {
        fs::write(report_dir.join(name), content)?;
        written.push(format!("report/{name}"));
        Ok(())
    };
    write("summary.csv", &summary_csv)?;
    write("summary.json", &summary_json)?;
    write("accuracy_vs_stage.svg", &accuracy_svg)?;
    if let Some(svg) = fidelity_svg {
        write("fidelity_vs_lambda.svg", &svg)?;
    }
    if let Some(svg) = ablation_svg {
        write("ablation_bars.svg", &svg)?;
    }
    Ok(written)
}

/// Battery output files: one row per (arm, seed, metric) plus aggregates.
pub fn write_battery_outputs(out_dir: &Path, outcome: &BatteryOutcome) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut results = String::from("arm,seed,metric,value\n");
    for r in &outcome.results {
        match (&r.report, &r.error) {
            (Some(report), _) => {
                for (metric, value) in report.flatten() {
                    results.push_str(&format!("{},{},{metric},{value:.6}\n", r.arm, r.seed));
                }
            }
            (None, Some(err)) => {
                results.push_str(&format!("{},{},error,NaN # {err}\n", r.arm, r.seed));
            }
            (None, None) => {}
        }
    }
    let mut summary = String::from("arm,metric,mean,stddev,runs\n");
    for s in &outcome.summary {
        summary.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            s.arm, s.metric, s.mean, s.stddev, s.runs
        ));
    }
    fs::write(out_dir.join("results.csv"), results)?;
    fs::write(out_dir.join("summary.csv"), summary)?;
    let json = serde_json::to_string_pretty(outcome).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(out_dir.join("outcome.json"), json)?;
    Ok(())
}
