use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use synlab_cli::config::{parse_config, ExperimentConfig};
use synlab_cli::pipeline::{run_stages, write_manifest, RunContext, Stage, ALL_STAGES};
use synlab_cli::report::{emit_report, write_battery_outputs};
use synlab_core::eval::run_ablation_battery;

/// Guidance-spectrum curriculum experiments on the glyph benchmark.
#[derive(Parser)]
#[command(name = "synlab", version, about)]
struct Cli {
    /// Experiment config file (flat key = value format).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory override (also honors SYNLAB_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Reuse existing stage artifacts instead of recomputing them.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline end to end.
    Run,
    /// Generate the benchmark dataset splits.
    GenData,
    /// Train the conditional noise model on the training split.
    TrainDiffusion,
    /// Pretrain the classifier, identify hard samples, generate and filter
    /// the guidance spectrum.
    GenSpectrum,
    /// Train the classifier under the configured curriculum.
    Train,
    /// Evaluate the trained classifier on the ID/OOD test splits.
    Evaluate,
    /// Run the ablation battery (multiple arms and seeds).
    Ablate,
    /// Emit summary files and plots for a completed run.
    Report,
}

enum CliError {
    Config(String),
    Stage(String),
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".to_string()))?;
    let mut cfg = parse_config(path).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| std::env::var("SYNLAB_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok((cfg, out_dir))
}

fn stage_set(command: &Command) -> Option<&'static [Stage]> {
    match command {
        Command::Run => Some(&ALL_STAGES),
        Command::GenData => Some(&[Stage::GenData]),
        Command::TrainDiffusion => Some(&[Stage::TrainDiffusion]),
        Command::GenSpectrum => Some(&[
            Stage::PretrainClassifier,
            Stage::IdentifyHard,
            Stage::GenSpectrum,
            Stage::Filter,
        ]),
        Command::Train => Some(&[Stage::CurriculumTrain]),
        Command::Evaluate => Some(&[Stage::Evaluate]),
        Command::Ablate | Command::Report => None,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cfg, out_dir) = load_config(&cli)?;
    match &cli.command {
        Command::Ablate => {
            let battery = cfg
                .battery_config()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| CliError::Stage(e.to_string()))?;
            let outcome = pool
                .install(|| run_ablation_battery(&battery))
                .map_err(|e| CliError::Stage(e.to_string()))?;
            write_battery_outputs(&out_dir.join("ablation"), &outcome)
                .map_err(|e| CliError::Stage(e.to_string()))?;
            for s in outcome
                .summary
                .iter()
                .filter(|s| s.metric == "accuracy_all")
            {
                println!("{}: accuracy_all = {:.4} +- {:.4} ({} runs)", s.arm, s.mean, s.stddev, s.runs);
            }
            println!("battery outputs in {}", out_dir.join("ablation").display());
            Ok(())
        }
        Command::Report => {
            let written = emit_report(&out_dir).map_err(|e| CliError::Stage(e.to_string()))?;
            for f in written {
                println!("wrote {f}");
            }
            Ok(())
        }
        command => {
            let stages = stage_set(command).unwrap();
            let ctx = RunContext::new(cfg.clone(), out_dir.clone());
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| CliError::Stage(e.to_string()))?;
            pool.install(|| run_stages(&ctx, stages, cli.resume))
                .map_err(|e| CliError::Stage(e.to_string()))?;
            write_manifest(&ctx).map_err(|e| CliError::Stage(e.to_string()))?;
            println!("run directory: {}", out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Stage(msg)) => {
            eprintln!("stage failure: {msg}");
            ExitCode::from(3)
        }
    }
}
