//! Staged experiment pipeline with content-hash manifest and resume.
//!
//! Stages write their artifacts under the run directory; a manifest records
//! the SHA-256 of every artifact in stage order. Re-running with the same
//! config and seed reproduces the manifest bit-for-bit, for any worker
//! count. With `--resume`, stages whose outputs already exist are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use synlab_core::classifier::{identify_hard, identify_hard_tail, train_epochs, Classifier, ClassifierSpec};
use synlab_core::curriculum::{
    run_adaptive, run_nonadaptive, split_validation, CurriculumConfig, StageLog, Strategy,
    SyntheticScale, TailRebalance,
};
use synlab_core::data::{
    assign_groups, clean_renders, make_longtail_dataset, make_lowquality_dataset, DataBundle,
    Dataset, SampleId,
};
use synlab_core::diffusion::train_noise_model;
use synlab_core::error::{Error, Result};
use synlab_core::eval::{evaluate, MetricsReport, Task, ThresholdChoice};
use synlab_core::io;
use synlab_core::rng;
use synlab_core::schedule::make_linear_schedule;
use synlab_core::spectrum::{
    calibrate_threshold, filter_spectrum, generate_spectrum, score_spectrum, FilterModel,
    SpectrumConfig, SpectrumEntry,
};

use crate::config::ExperimentConfig;

/// Pipeline stages in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainDiffusion,
    PretrainClassifier,
    IdentifyHard,
    GenSpectrum,
    Filter,
    CurriculumTrain,
    Evaluate,
}

pub const ALL_STAGES: [Stage; 8] = [
    Stage::GenData,
    Stage::TrainDiffusion,
    Stage::PretrainClassifier,
    Stage::IdentifyHard,
    Stage::GenSpectrum,
    Stage::Filter,
    Stage::CurriculumTrain,
    Stage::Evaluate,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::PretrainClassifier => "pretrain-classifier",
            Stage::IdentifyHard => "identify-hard",
            Stage::GenSpectrum => "gen-spectrum",
            Stage::Filter => "filter",
            Stage::CurriculumTrain => "curriculum-train",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Artifact paths relative to the run directory.
    pub fn outputs(self) -> Vec<&'static str> {
        match self {
            Stage::GenData => vec![
                "data/train.dsdt",
                "data/id_test.dsdt",
                "data/ood_test.dsdt",
                "data/manifest.kv",
            ],
            Stage::TrainDiffusion => vec!["diffusion/model.dsnm"],
            Stage::PretrainClassifier => vec!["classifier/pretrained.dscf"],
            Stage::IdentifyHard => vec!["spectrum/hard.dsdt"],
            Stage::GenSpectrum => vec!["spectrum/spectrum.dssp", "spectrum/manifest.kv"],
            Stage::Filter => vec!["spectrum/filtered.dssp", "spectrum/filter.kv"],
            Stage::CurriculumTrain => vec!["train/final.dscf", "train/stages.jsonl"],
            Stage::Evaluate => vec!["eval/metrics.json", "eval/metrics.csv"],
        }
    }
}

pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub run_dir: PathBuf,
}

impl RunContext {
    pub fn new(cfg: ExperimentConfig, run_dir: PathBuf) -> Self {
        RunContext { cfg, run_dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn require(&self, rel: &str, produced_by: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::invalid(format!(
                "missing artifact {rel}; run the '{}' stage first",
                produced_by.name()
            )));
        }
        Ok(p)
    }

    fn load_bundle(&self) -> Result<DataBundle> {
        let train = io::load_dataset(&self.require("data/train.dsdt", Stage::GenData)?)?;
        let id_test = io::load_dataset(&self.require("data/id_test.dsdt", Stage::GenData)?)?;
        let ood_test = io::load_dataset(&self.require("data/ood_test.dsdt", Stage::GenData)?)?;
        let mut counts = vec![0usize; self.cfg.num_classes];
        for s in &train {
            counts[s.label as usize] += 1;
        }
        let group_of_class = assign_groups(&counts);
        Ok(DataBundle {
            train,
            id_test,
            ood_test,
            group_of_class,
            train_counts: counts,
        })
    }

    fn load_hard(&self) -> Result<Dataset> {
        io::load_dataset(&self.require("spectrum/hard.dsdt", Stage::IdentifyHard)?)
    }

    fn load_spectrum_entries(&self, file: &str, stage: Stage) -> Result<Vec<SpectrumEntry>> {
        let hard = self.load_hard()?;
        let labels: BTreeMap<SampleId, u16> =
            hard.iter().map(|s| (s.sample_id, s.label)).collect();
        let manifest_path = self.require("spectrum/manifest.kv", Stage::GenSpectrum)?;
        let pairs = io::kv_parse(&fs::read_to_string(&manifest_path)?)?;
        let get = |key: &str| -> Result<String> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::invalid(format!("spectrum manifest missing '{key}'")))
        };
        let height: usize = get("height")?.parse().map_err(|_| Error::invalid("bad height"))?;
        let width: usize = get("width")?.parse().map_err(|_| Error::invalid("bad width"))?;
        let levels: Vec<f64> = get("grid")?
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::invalid("bad grid")))
            .collect::<Result<_>>()?;
        io::load_spectrum(
            &self.require(file, stage)?,
            height,
            width,
            &levels,
            &|sid| labels.get(&sid).copied(),
        )
    }

    /// Calibrated threshold recorded by gen-spectrum.
    fn recorded_threshold(&self) -> Result<f64> {
        let manifest_path = self.require("spectrum/manifest.kv", Stage::GenSpectrum)?;
        let pairs = io::kv_parse(&fs::read_to_string(&manifest_path)?)?;
        pairs
            .iter()
            .find(|(k, _)| k == "calibrated_threshold")
            .and_then(|(_, v)| v.parse::<f64>().ok())
            .ok_or_else(|| Error::invalid("spectrum manifest missing 'calibrated_threshold'"))
    }

    fn resolve_threshold(&self) -> Result<f64> {
        match self.cfg.h_filter.resolve()? {
            ThresholdChoice::Auto => self.recorded_threshold(),
            ThresholdChoice::Fixed(h) => Ok(h),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run_gen_data(ctx: &RunContext) -> Result<()> {
    let spec = ctx.cfg.dataset_spec();
    let bundle = match ctx.cfg.task {
        Task::Longtail => make_longtail_dataset(&spec)?,
        Task::LowQuality => make_lowquality_dataset(&spec)?,
    };
    fs::create_dir_all(ctx.path("data"))?;
    io::save_dataset(&bundle.train, &ctx.path("data/train.dsdt"))?;
    io::save_dataset(&bundle.id_test, &ctx.path("data/id_test.dsdt"))?;
    io::save_dataset(&bundle.ood_test, &ctx.path("data/ood_test.dsdt"))?;
    let mut pairs = vec![
        ("task".to_string(), ctx.cfg.task.name().to_string()),
        ("num_classes".to_string(), spec.num_classes.to_string()),
        ("head_count".to_string(), spec.head_count.to_string()),
        ("imbalance_ratio".to_string(), format!("{}", spec.imbalance_ratio)),
        ("corrupt_fraction".to_string(), format!("{}", spec.corrupt_fraction)),
        ("seed".to_string(), spec.seed.to_string()),
        ("train_size".to_string(), bundle.train.len().to_string()),
        ("id_test_size".to_string(), bundle.id_test.len().to_string()),
        ("ood_test_size".to_string(), bundle.ood_test.len().to_string()),
    ];
    for (c, n) in bundle.train_counts.iter().enumerate() {
        pairs.push((format!("count_{c}"), n.to_string()));
        pairs.push((
            format!("group_{c}"),
            bundle.group_of_class[c].name().to_string(),
        ));
    }
    write_file(&ctx.path("data/manifest.kv"), io::kv_to_string(&pairs).as_bytes())
}

fn run_train_diffusion(ctx: &RunContext) -> Result<()> {
    let bundle = ctx.load_bundle()?;
    let schedule = make_linear_schedule(ctx.cfg.schedule_steps, ctx.cfg.beta_min, ctx.cfg.beta_max)?;
    let mut noise_cfg = ctx.cfg.noise_train_config();
    noise_cfg.seed = rng::derive_seed(ctx.cfg.seed, "noise-train", &[]);
    let (model, _) = train_noise_model(&bundle.train, ctx.cfg.num_classes, &schedule, &noise_cfg)?;
    fs::create_dir_all(ctx.path("diffusion"))?;
    io::save_noise_model(&model, &ctx.path("diffusion/model.dsnm"))
}

fn run_pretrain_classifier(ctx: &RunContext) -> Result<()> {
    let bundle = ctx.load_bundle()?;
    let h = bundle.train[0].image.height;
    let w = bundle.train[0].image.width;
    let mut clf = Classifier::init(
        ClassifierSpec::new(h, w, ctx.cfg.num_classes),
        rng::derive_seed(ctx.cfg.seed, "clf-init", &[]),
    );
    let mut cfg = ctx.cfg.train_config();
    cfg.seed = rng::derive_seed(ctx.cfg.seed, "pretrain", &[]);
    train_epochs(&mut clf, &bundle.train, &cfg, ctx.cfg.pretrain_epochs)?;
    fs::create_dir_all(ctx.path("classifier"))?;
    io::save_classifier(&clf, &ctx.path("classifier/pretrained.dscf"))
}

fn run_identify_hard(ctx: &RunContext) -> Result<()> {
    let bundle = ctx.load_bundle()?;
    let hard = match ctx.cfg.task {
        Task::Longtail => identify_hard_tail(&bundle.train, &bundle.tail_classes()),
        Task::LowQuality => {
            let clf = io::load_classifier(
                &ctx.require("classifier/pretrained.dscf", Stage::PretrainClassifier)?,
            )?;
            identify_hard(&clf, &bundle.train, ctx.cfg.h_hard)?
        }
    };
    if hard.is_empty() {
        return Err(Error::EmptyInput(
            "hard set (no samples matched the hard rule)".into(),
        ));
    }
    fs::create_dir_all(ctx.path("spectrum"))?;
    io::save_dataset(&hard, &ctx.path("spectrum/hard.dsdt"))
}

fn run_gen_spectrum(ctx: &RunContext) -> Result<()> {
    let hard = ctx.load_hard()?;
    let model = io::load_noise_model(&ctx.require("diffusion/model.dsnm", Stage::TrainDiffusion)?)?;
    let schedule = make_linear_schedule(ctx.cfg.schedule_steps, ctx.cfg.beta_min, ctx.cfg.beta_max)?;
    let grid = ctx.cfg.guidance_grid.resolve()?;
    let spec_cfg = SpectrumConfig {
        seeds_per_image: ctx.cfg.m_seeds,
        text_weight: ctx.cfg.text_weight,
        sampler: ctx.cfg.sampler,
        ddim_steps: ctx.cfg.ddim_steps,
        global_seed: rng::derive_seed(ctx.cfg.seed, "spectrum", &[]),
    };
    let mut entries = generate_spectrum(&hard, &model, &grid, &spec_cfg, &schedule)?;

    let dataset_spec = ctx.cfg.dataset_spec();
    let clean = clean_renders(&dataset_spec, 96, "filter-train")?;
    let filter = FilterModel::fit(
        &clean,
        ctx.cfg.num_classes,
        rng::derive_seed(ctx.cfg.seed, "filter", &[]),
    )?;
    score_spectrum(&filter, &mut entries);
    let calibrated = calibrate_threshold(&filter, &clean)?;

    fs::create_dir_all(ctx.path("spectrum"))?;
    io::save_spectrum(&entries, &ctx.path("spectrum/spectrum.dssp"))?;
    let h = hard[0].image.height;
    let w = hard[0].image.width;
    let pairs = vec![
        ("height".to_string(), h.to_string()),
        ("width".to_string(), w.to_string()),
        (
            "grid".to_string(),
            grid.levels()
                .iter()
                .map(|l| format!("{l}"))
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("m_seeds".to_string(), ctx.cfg.m_seeds.to_string()),
        ("text_weight".to_string(), format!("{}", ctx.cfg.text_weight)),
        ("sampler".to_string(), ctx.cfg.sampler.name().to_string()),
        ("global_seed".to_string(), spec_cfg.global_seed.to_string()),
        ("entries".to_string(), entries.len().to_string()),
        ("calibrated_threshold".to_string(), format!("{calibrated}")),
    ];
    write_file(
        &ctx.path("spectrum/manifest.kv"),
        io::kv_to_string(&pairs).as_bytes(),
    )
}

fn run_filter(ctx: &RunContext) -> Result<()> {
    let mut entries = ctx.load_spectrum_entries("spectrum/spectrum.dssp", Stage::GenSpectrum)?;
    let threshold = ctx.resolve_threshold()?;
    let kept = filter_spectrum(&mut entries, threshold);
    io::save_spectrum(&entries, &ctx.path("spectrum/filtered.dssp"))?;
    let pairs = vec![
        ("threshold".to_string(), format!("{threshold}")),
        ("kept".to_string(), kept.to_string()),
        ("total".to_string(), entries.len().to_string()),
    ];
    write_file(
        &ctx.path("spectrum/filter.kv"),
        io::kv_to_string(&pairs).as_bytes(),
    )
}

fn run_curriculum_train(ctx: &RunContext) -> Result<()> {
    let bundle = ctx.load_bundle()?;
    let hard = ctx.load_hard()?;
    let entries = ctx.load_spectrum_entries("spectrum/filtered.dssp", Stage::Filter)?;
    let mut clf = io::load_classifier(
        &ctx.require("classifier/pretrained.dscf", Stage::PretrainClassifier)?,
    )?;

    let hard_ids: std::collections::BTreeSet<SampleId> =
        hard.iter().map(|s| s.sample_id).collect();
    let d_h: Dataset = hard.clone();
    let d_nh: Dataset = bundle
        .train
        .iter()
        .filter(|s| !hard_ids.contains(&s.sample_id))
        .cloned()
        .collect();

    let grid = ctx.cfg.guidance_grid.resolve()?;
    let mut train_cfg = ctx.cfg.train_config();
    train_cfg.seed = rng::derive_seed(ctx.cfg.seed, "arm-train", &[]);
    let mut cur_cfg = CurriculumConfig::new(ctx.cfg.strategy, grid.clone(), train_cfg);
    cur_cfg.rollback_probe = ctx.cfg.rollback_probe;
    cur_cfg.validation_per_lambda = ctx.cfg.validation_per_lambda;
    cur_cfg.scale = ctx.cfg.scale.map(|multiplier| SyntheticScale {
        multiplier,
        hard_count: hard.len(),
    });
    if ctx.cfg.task == Task::Longtail {
        cur_cfg.tail = Some(TailRebalance {
            fraction: ctx.cfg.tail_fraction,
            classes: bundle.tail_classes(),
        });
    }

    let logs: Vec<StageLog> = if ctx.cfg.strategy == Strategy::Adaptive {
        let (train_entries, train_hard, validation) = split_validation(
            entries,
            &grid,
            &d_h,
            ctx.cfg.validation_per_lambda,
            rng::derive_seed(ctx.cfg.seed, "validation", &[]),
        )?;
        let mut d_all: Dataset = d_nh.iter().chain(train_hard.iter()).cloned().collect();
        d_all.sort_by_key(|s| s.sample_id);
        cur_cfg.probe_size = ((ctx.cfg.probe_fraction * d_all.len() as f64).round() as usize)
            .min(d_all.len());
        run_adaptive(&mut clf, &cur_cfg, &train_entries, &d_nh, &d_all, &validation)?
    } else {
        run_nonadaptive(&mut clf, &cur_cfg, &entries, &d_nh, &d_h)?
    };

    fs::create_dir_all(ctx.path("train"))?;
    io::save_classifier(&clf, &ctx.path("train/final.dscf"))?;
    let mut jsonl = String::new();
    for log in &logs {
        jsonl.push_str(&serde_json::to_string(log).map_err(|e| Error::invalid(e.to_string()))?);
        jsonl.push('\n');
    }
    write_file(&ctx.path("train/stages.jsonl"), jsonl.as_bytes())
}

/// Fixed column set of the metrics CSV.
pub const METRICS_CSV_HEADER: &str = "metric,value";

pub fn metrics_to_csv(report: &MetricsReport) -> String {
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for (k, v) in report.flatten() {
        csv.push_str(&format!("{k},{v:.6}\n"));
    }
    csv
}

fn run_evaluate(ctx: &RunContext) -> Result<()> {
    let bundle = ctx.load_bundle()?;
    let clf = io::load_classifier(&ctx.require("train/final.dscf", Stage::CurriculumTrain)?)?;
    let report = evaluate(&clf, &bundle)?;
    fs::create_dir_all(ctx.path("eval"))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&ctx.path("eval/metrics.json"), json.as_bytes())?;
    write_file(&ctx.path("eval/metrics.csv"), metrics_to_csv(&report).as_bytes())
}

fn run_stage(ctx: &RunContext, stage: Stage) -> Result<()> {
    match stage {
        Stage::GenData => run_gen_data(ctx),
        Stage::TrainDiffusion => run_train_diffusion(ctx),
        Stage::PretrainClassifier => run_pretrain_classifier(ctx),
        Stage::IdentifyHard => run_identify_hard(ctx),
        Stage::GenSpectrum => run_gen_spectrum(ctx),
        Stage::Filter => run_filter(ctx),
        Stage::CurriculumTrain => run_curriculum_train(ctx),
        Stage::Evaluate => run_evaluate(ctx),
    }
}

/// Normalized config echo: volatile keys (out_dir, workers) cleared so the
/// manifest is a pure function of the experiment itself.
pub fn normalized_config(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = String::new();
    c.workers = 0;
    c.to_kv()
}

/// Execute the given stages in order, honoring `resume`, then rewrite the
/// manifest of content hashes for all stages whose outputs exist.
pub fn run_stages(ctx: &RunContext, stages: &[Stage], resume: bool) -> Result<()> {
    fs::create_dir_all(&ctx.run_dir)?;
    let echo_path = ctx.path("config.resolved.kv");
    let echo = normalized_config(&ctx.cfg);
    if echo_path.exists() {
        let existing = fs::read_to_string(&echo_path)?;
        if existing != echo {
            return Err(Error::invalid(format!(
                "run directory {} was produced by a different config; refusing to mix artifacts",
                ctx.run_dir.display()
            )));
        }
    } else {
        write_file(&echo_path, echo.as_bytes())?;
    }
    for &stage in stages {
        let outputs = stage.outputs();
        let all_exist = outputs.iter().all(|rel| ctx.path(rel).exists());
        if resume && all_exist {
            eprintln!("[skip] {} (artifacts present)", stage.name());
            continue;
        }
        eprintln!("[run ] {}", stage.name());
        run_stage(ctx, stage).map_err(|e| {
            Error::invalid(format!("stage '{}' failed: {e}", stage.name()))
        })?;
    }
    write_manifest(ctx)
}

/// Manifest lines: stage, relative path, SHA-256 of the artifact bytes.
pub fn write_manifest(ctx: &RunContext) -> Result<()> {
    let mut lines = vec![format!(
        "config\tconfig.resolved.kv\t{}",
        io::sha256_hex(normalized_config(&ctx.cfg).as_bytes())
    )];
    for stage in ALL_STAGES {
        for rel in stage.outputs() {
            let p = ctx.path(rel);
            if p.exists() {
                lines.push(format!("{}\t{rel}\t{}", stage.name(), io::hash_file(&p)?));
            }
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    write_file(&ctx.path("manifest.txt"), text.as_bytes())
}

/// Full pipeline inside a dedicated worker pool.
pub fn run_pipeline(cfg: &ExperimentConfig, run_dir: &Path, resume: bool) -> Result<PathBuf> {
    let ctx = RunContext::new(cfg.clone(), run_dir.to_path_buf());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_stages(&ctx, &ALL_STAGES, resume))?;
    Ok(ctx.run_dir.clone())
}
