//! Metrics (group-wise accuracy, macro-F1, worst-k) and the ablation battery.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    identify_hard, identify_hard_tail, predict_class, train_epochs, Classifier, ClassifierSpec,
    TrainConfig,
};
use crate::curriculum::{
    run_adaptive, run_nonadaptive, split_validation, CurriculumConfig, StageLog, Strategy,
    SyntheticScale, TailRebalance,
};
use crate::data::{
    clean_renders, make_longtail_dataset, make_lowquality_dataset, DataBundle, DatasetSpec, Dataset,
    Group, LabeledImage,
};
use crate::diffusion::{train_noise_model, NoiseModel, NoiseTrainConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{make_linear_schedule, VarianceSchedule};
use crate::spectrum::{
    calibrate_threshold, filter_spectrum, generate_spectrum, score_spectrum, FilterModel,
    GuidanceGrid, SpectrumConfig, SpectrumEntry,
};

/// Benchmark task flavor; picks the hard-sample rule and default strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Longtail,
    LowQuality,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Longtail => "longtail",
            Task::LowQuality => "lowquality",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "longtail" => Ok(Task::Longtail),
            "lowquality" => Ok(Task::LowQuality),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }

    pub fn default_strategy(self) -> Strategy {
        match self {
            Task::Longtail => Strategy::DiverseToSpecific,
            Task::LowQuality => Strategy::Adaptive,
        }
    }

    pub fn default_grid(self) -> GuidanceGrid {
        match self {
            Task::Longtail => GuidanceGrid::longtail(),
            Task::LowQuality => GuidanceGrid::lowquality(),
        }
    }
}

/// Per-class evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: u16,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub f1: f64,
}

/// Full evaluation of one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_all: f64,
    pub accuracy_many: Option<f64>,
    pub accuracy_medium: Option<f64>,
    pub accuracy_few: Option<f64>,
    pub macro_f1_id: f64,
    pub macro_f1_ood: f64,
    pub worst_k: Vec<(usize, f64)>,
    pub per_class: Vec<PerClassRow>,
}

impl MetricsReport {
    /// Flat (metric, value) pairs for CSV emission and aggregation.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let mut out = vec![("accuracy_all".to_string(), self.accuracy_all)];
        if let Some(v) = self.accuracy_many {
            out.push(("accuracy_many".into(), v));
        }
        if let Some(v) = self.accuracy_medium {
            out.push(("accuracy_medium".into(), v));
        }
        if let Some(v) = self.accuracy_few {
            out.push(("accuracy_few".into(), v));
        }
        out.push(("macro_f1_id".into(), self.macro_f1_id));
        out.push(("macro_f1_ood".into(), self.macro_f1_ood));
        for (k, v) in &self.worst_k {
            out.push((format!("worst_{k}"), *v));
        }
        out
    }
}

/// Top-1 predictions over a test split.
pub fn predictions(clf: &Classifier, test: &[LabeledImage]) -> Vec<u16> {
    test.par_iter()
        .map(|s| predict_class(clf, &s.image))
        .collect()
}

fn per_class_stats(preds: &[u16], test: &[LabeledImage], num_classes: usize) -> Vec<PerClassRow> {
    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    for (p, s) in preds.iter().zip(test) {
        support[s.label as usize] += 1;
        predicted[*p as usize] += 1;
        if *p == s.label {
            correct[s.label as usize] += 1;
        }
    }
    (0..num_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| {
            let tp = correct[c] as f64;
            let precision = if predicted[c] > 0 {
                tp / predicted[c] as f64
            } else {
                0.0
            };
            let recall = tp / support[c] as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            PerClassRow {
                class: c as u16,
                support: support[c],
                correct: correct[c],
                accuracy: recall,
                f1,
            }
        })
        .collect()
}

/// Group-wise balanced accuracy from precomputed predictions. Groups with no
/// classes present in the test are absent from the result, not zero.
pub fn groupwise_accuracy_from(
    preds: &[u16],
    test: &[LabeledImage],
    group_of_class: &[Group],
) -> (f64, Option<f64>, Option<f64>, Option<f64>) {
    let rows = per_class_stats(preds, test, group_of_class.len());
    let mean_over = |group: Option<Group>| -> Option<f64> {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| group.is_none_or(|g| group_of_class[r.class as usize] == g))
            .map(|r| r.accuracy)
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(accs.iter().sum::<f64>() / accs.len() as f64)
        }
    };
    (
        mean_over(None).unwrap_or(f64::NAN),
        mean_over(Some(Group::Many)),
        mean_over(Some(Group::Medium)),
        mean_over(Some(Group::Few)),
    )
}

/// Per-class top-1 accuracy averaged within each frequency group.
pub fn groupwise_accuracy(
    clf: &Classifier,
    test: &[LabeledImage],
    group_of_class: &[Group],
) -> (f64, Option<f64>, Option<f64>, Option<f64>) {
    groupwise_accuracy_from(&predictions(clf, test), test, group_of_class)
}

/// Unweighted mean of per-class F1 over classes present in the test.
pub fn macro_f1_from(preds: &[u16], test: &[LabeledImage], num_classes: usize) -> f64 {
    let rows = per_class_stats(preds, test, num_classes);
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64
}

pub fn macro_f1(clf: &Classifier, test: &[LabeledImage]) -> f64 {
    macro_f1_from(&predictions(clf, test), test, clf.spec.classes)
}

/// Mean per-class accuracy over the k lowest-accuracy classes (ties broken
/// by class index).
pub fn worst_k_accuracy_from(
    preds: &[u16],
    test: &[LabeledImage],
    num_classes: usize,
    k: usize,
) -> Result<f64> {
    let rows = per_class_stats(preds, test, num_classes);
    if k == 0 || k > rows.len() {
        return Err(Error::invalid(format!(
            "k must lie in 1..={}, got {k}",
            rows.len()
        )));
    }
    let mut accs: Vec<(f64, u16)> = rows.iter().map(|r| (r.accuracy, r.class)).collect();
    accs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(accs.iter().take(k).map(|(a, _)| a).sum::<f64>() / k as f64)
}

pub fn worst_k_accuracy(clf: &Classifier, test: &[LabeledImage], k: usize) -> Result<f64> {
    worst_k_accuracy_from(&predictions(clf, test), test, clf.spec.classes, k)
}

/// Evaluate one model on both test splits of a bundle.
pub fn evaluate(clf: &Classifier, bundle: &DataBundle) -> Result<MetricsReport> {
    let id_preds = predictions(clf, &bundle.id_test);
    let ood_preds = predictions(clf, &bundle.ood_test);
    let (all, many, medium, few) =
        groupwise_accuracy_from(&id_preds, &bundle.id_test, &bundle.group_of_class);
    let k_max = bundle.group_of_class.len();
    let mut worst = Vec::new();
    for k in 1..=k_max {
        worst.push((
            k,
            worst_k_accuracy_from(&id_preds, &bundle.id_test, k_max, k)?,
        ));
    }
    Ok(MetricsReport {
        accuracy_all: all,
        accuracy_many: many,
        accuracy_medium: medium,
        accuracy_few: few,
        macro_f1_id: macro_f1_from(&id_preds, &bundle.id_test, k_max),
        macro_f1_ood: macro_f1_from(&ood_preds, &bundle.ood_test, k_max),
        worst_k: worst,
        per_class: per_class_stats(&id_preds, &bundle.id_test, k_max),
    })
}

// ---------------------------------------------------------------------------
// Ablation battery
// ---------------------------------------------------------------------------

/// One experiment arm: identical data, seeds and budgets, one ablated knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationArm {
    RealOnly,
    TextOnly,
    FixedGuidance(f64),
    AllLevels,
    DiverseToSpecific,
    SpecificToDiverse,
    RandomOrder,
    Adaptive,
    FilterThreshold(f64),
    SyntheticScale(f64),
}

impl AblationArm {
    pub fn name(&self) -> String {
        match self {
            AblationArm::RealOnly => "real_only".into(),
            AblationArm::TextOnly => "text_only".into(),
            AblationArm::FixedGuidance(l) => format!("fixed_{l}"),
            AblationArm::AllLevels => "all_levels".into(),
            AblationArm::DiverseToSpecific => "diverse_to_specific".into(),
            AblationArm::SpecificToDiverse => "specific_to_diverse".into(),
            AblationArm::RandomOrder => "random".into(),
            AblationArm::Adaptive => "adaptive".into(),
            AblationArm::FilterThreshold(h) => format!("threshold_{h}"),
            AblationArm::SyntheticScale(s) => format!("scale_{s}"),
        }
    }
}

/// How the filtering threshold is chosen for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdChoice {
    /// 10th percentile of clean-render scores, calibrated per run.
    Auto,
    Fixed(f64),
}

/// Shared experiment recipe for a battery of arms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub task: Task,
    pub dataset: DatasetSpec,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub noise_train: NoiseTrainConfig,
    pub pretrain_epochs: usize,
    pub train: TrainConfig,
    pub grid: GuidanceGrid,
    pub seeds_per_image: usize,
    pub text_weight: f64,
    pub h_hard: f64,
    pub h_filter: ThresholdChoice,
    /// Per-stage synthetic volume as a multiple of the hard-real count.
    pub default_scale: Option<f64>,
    pub tail_fraction: f64,
    pub probe_fraction: f64,
    pub validation_per_lambda: usize,
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
}

impl BatteryConfig {
    pub fn for_task(task: Task, dataset: DatasetSpec, seeds: Vec<u64>) -> Self {
        BatteryConfig {
            task,
            dataset,
            schedule_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            noise_train: NoiseTrainConfig::default(),
            pretrain_epochs: 5,
            train: TrainConfig::default(),
            grid: task.default_grid(),
            seeds_per_image: 4,
            text_weight: 3.0,
            h_hard: 0.5,
            h_filter: ThresholdChoice::Auto,
            default_scale: match task {
                Task::Longtail => Some(3.0),
                Task::LowQuality => None,
            },
            tail_fraction: 0.136,
            probe_fraction: 0.1,
            validation_per_lambda: 16,
            arms: Vec::new(),
            seeds,
        }
    }
}

/// Expensive per-seed artifacts shared across every arm of a battery run.
pub struct SeedArtifacts {
    pub seed: u64,
    pub bundle: DataBundle,
    pub schedule: VarianceSchedule,
    pub noise_model: NoiseModel,
    pub pretrained: Classifier,
    pub filter: FilterModel,
    /// Scored but unfiltered spectrum; arms re-apply their own threshold.
    pub entries: Vec<SpectrumEntry>,
    pub hard: Vec<LabeledImage>,
    pub d_nh: Dataset,
    pub d_h: Dataset,
    pub calibrated_threshold: f64,
}

/// Run the full phase-1 pipeline for one seed: dataset, diffusion model,
/// pretrained classifier, filter model, hard set and scored spectrum.
pub fn build_seed_artifacts(cfg: &BatteryConfig, seed: u64) -> Result<SeedArtifacts> {
    let mut dataset_spec = cfg.dataset.clone();
    dataset_spec.seed = rng::derive_seed(seed, "dataset", &[]);
    let bundle = match cfg.task {
        Task::Longtail => make_longtail_dataset(&dataset_spec)?,
        Task::LowQuality => make_lowquality_dataset(&dataset_spec)?,
    };
    let schedule = make_linear_schedule(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)?;

    let mut noise_cfg = cfg.noise_train.clone();
    noise_cfg.seed = rng::derive_seed(seed, "noise-train", &[]);
    let (noise_model, _) = train_noise_model(
        &bundle.train,
        dataset_spec.num_classes,
        &schedule,
        &noise_cfg,
    )?;

    let h = bundle.train[0].image.height;
    let w = bundle.train[0].image.width;
    let mut pretrained = Classifier::init(
        ClassifierSpec::new(h, w, dataset_spec.num_classes),
        rng::derive_seed(seed, "clf-init", &[]),
    );
    let pre_cfg = TrainConfig {
        seed: rng::derive_seed(seed, "pretrain", &[]),
        ..cfg.train.clone()
    };
    train_epochs(&mut pretrained, &bundle.train, &pre_cfg, cfg.pretrain_epochs)?;

    let clean = clean_renders(&dataset_spec, 96, "filter-train")?;
    let filter = FilterModel::fit(
        &clean,
        dataset_spec.num_classes,
        rng::derive_seed(seed, "filter", &[]),
    )?;
    let calibrated_threshold = calibrate_threshold(&filter, &clean)?;

    let hard = match cfg.task {
        Task::Longtail => identify_hard_tail(&bundle.train, &bundle.tail_classes()),
        Task::LowQuality => identify_hard(&pretrained, &bundle.train, cfg.h_hard)?,
    };
    if hard.is_empty() {
        return Err(Error::EmptyInput(
            "hard set (no samples matched the hard rule)".into(),
        ));
    }
    let hard_ids: BTreeSet<_> = hard.iter().map(|s| s.sample_id).collect();
    let d_h: Dataset = hard.clone();
    let d_nh: Dataset = bundle
        .train
        .iter()
        .filter(|s| !hard_ids.contains(&s.sample_id))
        .cloned()
        .collect();

    let spec_cfg = SpectrumConfig {
        seeds_per_image: cfg.seeds_per_image,
        text_weight: cfg.text_weight,
        global_seed: rng::derive_seed(seed, "spectrum", &[]),
        ..SpectrumConfig::new(cfg.seeds_per_image, 0)
    };
    let mut entries = generate_spectrum(&hard, &noise_model, &cfg.grid, &spec_cfg, &schedule)?;
    score_spectrum(&filter, &mut entries);

    Ok(SeedArtifacts {
        seed,
        bundle,
        schedule,
        noise_model,
        pretrained,
        filter,
        entries,
        hard,
        d_nh,
        d_h,
        calibrated_threshold,
    })
}

/// Result of one (arm, seed) cell; failures are recorded, not fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Mean/stddev aggregate of one metric over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub metric: String,
    pub mean: f64,
    pub stddev: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryOutcome {
    pub results: Vec<ArmResult>,
    pub summary: Vec<ArmSummary>,
}

fn arm_strategy(cfg: &BatteryConfig, arm: &AblationArm) -> Strategy {
    match arm {
        AblationArm::RealOnly => Strategy::DiverseToSpecific,
        AblationArm::TextOnly => Strategy::Fixed(0.0),
        AblationArm::FixedGuidance(l) => Strategy::Fixed(*l),
        AblationArm::AllLevels => Strategy::AllLevels,
        AblationArm::DiverseToSpecific => Strategy::DiverseToSpecific,
        AblationArm::SpecificToDiverse => Strategy::SpecificToDiverse,
        AblationArm::RandomOrder => Strategy::RandomOrder,
        AblationArm::Adaptive => Strategy::Adaptive,
        AblationArm::FilterThreshold(_) | AblationArm::SyntheticScale(_) => {
            cfg.task.default_strategy()
        }
    }
}

/// Train and evaluate one arm against shared seed artifacts.
pub fn run_arm(
    cfg: &BatteryConfig,
    artifacts: &SeedArtifacts,
    arm: &AblationArm,
) -> Result<(MetricsReport, Vec<StageLog>)> {
    let strategy = arm_strategy(cfg, arm);
    let threshold = match arm {
        AblationArm::FilterThreshold(h) => *h,
        _ => match cfg.h_filter {
            ThresholdChoice::Auto => artifacts.calibrated_threshold,
            ThresholdChoice::Fixed(h) => h,
        },
    };
    let mut entries = artifacts.entries.clone();
    filter_spectrum(&mut entries, threshold);

    let scale_mult = match arm {
        AblationArm::RealOnly => Some(0.0),
        AblationArm::SyntheticScale(s) => Some(*s),
        _ => cfg.default_scale,
    };
    let scale = scale_mult.map(|multiplier| SyntheticScale {
        multiplier,
        hard_count: artifacts.hard.len(),
    });
    let tail = match cfg.task {
        Task::Longtail => Some(TailRebalance {
            fraction: cfg.tail_fraction,
            classes: artifacts.bundle.tail_classes(),
        }),
        Task::LowQuality => None,
    };

    let train = TrainConfig {
        seed: rng::derive_seed(artifacts.seed, "arm-train", &[]),
        ..cfg.train.clone()
    };
    let mut cur_cfg = CurriculumConfig::new(strategy, cfg.grid.clone(), train);
    cur_cfg.tail = tail;
    cur_cfg.scale = scale;
    cur_cfg.validation_per_lambda = cfg.validation_per_lambda;

    let mut clf = artifacts.pretrained.clone();
    let logs = if strategy == Strategy::Adaptive {
        let (train_entries, train_hard, validation) = split_validation(
            entries,
            &cfg.grid,
            &artifacts.d_h,
            cfg.validation_per_lambda,
            rng::derive_seed(artifacts.seed, "validation", &[]),
        )?;
        let mut d_all: Dataset = artifacts
            .d_nh
            .iter()
            .chain(train_hard.iter())
            .cloned()
            .collect();
        d_all.sort_by_key(|s| s.sample_id);
        cur_cfg.probe_size =
            ((cfg.probe_fraction * d_all.len() as f64).round() as usize).min(d_all.len());
        run_adaptive(
            &mut clf,
            &cur_cfg,
            &train_entries,
            &artifacts.d_nh,
            &d_all,
            &validation,
        )?
    } else {
        run_nonadaptive(
            &mut clf,
            &cur_cfg,
            &entries,
            &artifacts.d_nh,
            &artifacts.d_h,
        )?
    };
    let report = evaluate(&clf, &artifacts.bundle)?;
    Ok((report, logs))
}

fn aggregate(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut arms: Vec<String> = Vec::new();
    for r in results {
        if !arms.contains(&r.arm) {
            arms.push(r.arm.clone());
        }
    }
    let mut out = Vec::new();
    for arm in arms {
        let reports: Vec<&MetricsReport> = results
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.report.as_ref())
            .collect();
        if reports.is_empty() {
            continue;
        }
        let mut metric_names: Vec<String> = Vec::new();
        for r in &reports {
            for (k, _) in r.flatten() {
                if !metric_names.contains(&k) {
                    metric_names.push(k);
                }
            }
        }
        for metric in metric_names {
            let values: Vec<f64> = reports
                .iter()
                .flat_map(|r| {
                    r.flatten()
                        .into_iter()
                        .filter(|(k, _)| *k == metric)
                        .map(|(_, v)| v)
                })
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(ArmSummary {
                arm: arm.clone(),
                metric,
                mean,
                stddev: var.sqrt(),
                runs: values.len(),
            });
        }
    }
    out
}

/// Execute every (arm, seed) cell with shared per-seed artifacts. Arm
/// failures are recorded and the battery continues.
pub fn run_ablation_battery(cfg: &BatteryConfig) -> Result<BatteryOutcome> {
    if cfg.arms.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::invalid("battery needs at least one arm and one seed"));
    }
    let artifacts: Result<Vec<SeedArtifacts>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| build_seed_artifacts(cfg, seed))
        .collect();
    let artifacts = artifacts?;
    let cells: Vec<(usize, usize)> = (0..cfg.arms.len())
        .flat_map(|a| (0..cfg.seeds.len()).map(move |s| (a, s)))
        .collect();
    let results: Vec<ArmResult> = cells
        .par_iter()
        .map(|&(a, s)| {
            let arm = &cfg.arms[a];
            match run_arm(cfg, &artifacts[s], arm) {
                Ok((report, _)) => ArmResult {
                    arm: arm.name(),
                    seed: cfg.seeds[s],
                    report: Some(report),
                    error: None,
                },
                Err(e) => ArmResult {
                    arm: arm.name(),
                    seed: cfg.seeds[s],
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let summary = aggregate(&results);
    Ok(BatteryOutcome { results, summary })
}
