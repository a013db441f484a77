//! Integration tests for config handling, staged execution and reporting.

use std::fs;

use synlab_cli::config::{parse_config, parse_config_str};
use synlab_cli::pipeline::{
    metrics_to_csv, run_stages, RunContext, Stage, ALL_STAGES, METRICS_CSV_HEADER,
};
use synlab_cli::report::{emit_report, svg_bar_chart, svg_line_chart};
use synlab_core::eval::MetricsReport;

fn tiny_config_text() -> &'static str {
    "task = longtail\nseed = 3\nnum_classes = 6\nhead_count = 50\nimbalance_ratio = 16\ntest_per_class = 8\nschedule_steps = 40\ndiffusion_epochs = 2\ndiffusion_hidden = 48\nepochs = 5\ncurriculum_epochs = 4\npretrain_epochs = 1\nm_seeds = 2\nvalidation_per_lambda = 3\n"
}

#[test]
fn config_file_roundtrip_via_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.kv");
    fs::write(&path, tiny_config_text()).unwrap();
    let a = parse_config(&path).unwrap();
    let path2 = dir.path().join("echo.kv");
    fs::write(&path2, a.to_kv()).unwrap();
    let b = parse_config(&path2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_key_error_names_the_key() {
    let err = parse_config_str("task = longtail\nseed = 1\nlamda_grid = 0,0.5\n").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("lamda_grid"), "{msg}");
}

#[test]
fn metrics_csv_schema_is_golden() {
    let report = MetricsReport {
        accuracy_all: 0.5,
        accuracy_many: Some(0.75),
        accuracy_medium: None,
        accuracy_few: Some(0.25),
        macro_f1_id: 0.4,
        macro_f1_ood: 0.3,
        worst_k: vec![(1, 0.0), (2, 0.125)],
        per_class: vec![],
    };
    let csv = metrics_to_csv(&report);
    let expected = "metric,value\n\
                    accuracy_all,0.500000\n\
                    accuracy_many,0.750000\n\
                    accuracy_few,0.250000\n\
                    macro_f1_id,0.400000\n\
                    macro_f1_ood,0.300000\n\
                    worst_1,0.000000\n\
                    worst_2,0.125000\n";
    assert_eq!(csv, expected);
    assert!(csv.starts_with(METRICS_CSV_HEADER));
}

#[test]
fn plots_are_deterministic_byte_for_byte() {
    let series = vec![(
        "train".to_string(),
        vec![(0.0, 0.1), (1.0, 0.55), (2.0, 0.8)],
    )];
    let a = svg_line_chart("t", "x", "y", &series);
    let b = svg_line_chart("t", "x", "y", &series);
    assert_eq!(a, b);
    let bars = vec![("one".to_string(), 0.4), ("two".to_string(), 0.9)];
    assert_eq!(
        svg_bar_chart("t", "v", &bars),
        svg_bar_chart("t", "v", &bars)
    );
    assert!(a.starts_with("<svg "));
    assert!(a.trim_end().ends_with("</svg>"));
}

#[test]
fn report_requires_metrics_and_writes_no_partials() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit_report(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("evaluate"), "{msg}");
    assert!(msg.contains("curriculum-train"), "{msg}");
    assert!(!dir.path().join("report").exists(), "partial report written");
}

#[test]
fn standalone_stage_requires_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(tiny_config_text()).unwrap();
    let ctx = RunContext::new(cfg, dir.path().join("run"));
    let err = run_stages(&ctx, &[Stage::TrainDiffusion], false).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("gen-data"), "{msg}");
}

#[test]
fn mismatched_config_refuses_to_reuse_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(tiny_config_text()).unwrap();
    let ctx = RunContext::new(cfg.clone(), dir.path().join("run"));
    run_stages(&ctx, &[Stage::GenData], false).unwrap();
    let mut other = cfg;
    other.seed = 999;
    let ctx2 = RunContext::new(other, dir.path().join("run"));
    let err = run_stages(&ctx2, &[Stage::GenData], false).unwrap_err();
    assert!(err.to_string().contains("different config"));
}

#[test]
fn pipeline_stages_and_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config_str(tiny_config_text()).unwrap();
    let run_dir = dir.path().join("run");
    let ctx = RunContext::new(cfg, run_dir.clone());
    run_stages(&ctx, &ALL_STAGES, false).unwrap();
    for stage in ALL_STAGES {
        for rel in stage.outputs() {
            assert!(ctx.path(rel).exists(), "missing {rel}");
        }
    }
    // Resume skips completed work and leaves the manifest unchanged.
    let manifest_before = fs::read_to_string(run_dir.join("manifest.txt")).unwrap();
    run_stages(&ctx, &ALL_STAGES, true).unwrap();
    let manifest_after = fs::read_to_string(run_dir.join("manifest.txt")).unwrap();
    assert_eq!(manifest_before, manifest_after);

    let written = emit_report(&run_dir).unwrap();
    assert!(written.iter().any(|f| f.ends_with("summary.csv")));
    assert!(written.iter().any(|f| f.ends_with("accuracy_vs_stage.svg")));
    // Re-emitting is byte-identical (determinism of plots and summaries).
    let svg1 = fs::read(run_dir.join("report/accuracy_vs_stage.svg")).unwrap();
    emit_report(&run_dir).unwrap();
    let svg2 = fs::read(run_dir.join("report/accuracy_vs_stage.svg")).unwrap();
    assert_eq!(svg1, svg2);
}
