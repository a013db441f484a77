//! Stage-wise dataset assembly and training under non-adaptive and adaptive
//! guidance curricula.
//!
//! Non-adaptive runs follow a precomputed guidance schedule over the grid;
//! the adaptive run probes a per-level validation set before each stage and
//! picks the level whose mean ground-truth confidence improved the most
//! after a one-epoch update on a random real subset.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::classifier::{predict_proba, train_epochs, Classifier, EpochLog, TrainConfig};
use crate::data::{undersample_nontail, Dataset, LabeledImage, Origin, SampleId};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectrum::{GuidanceGrid, SpectrumEntry};

/// Curriculum strategy over guidance levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    DiverseToSpecific,
    SpecificToDiverse,
    RandomOrder,
    /// Single guidance level every curriculum epoch; hard reals are not
    /// re-added (the fixed-guidance ablation trains on S_lambda + non-hard).
    Fixed(f64),
    /// Every curriculum epoch uses the union of all guidance levels.
    AllLevels,
    Adaptive,
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::DiverseToSpecific => "diverse_to_specific".into(),
            Strategy::SpecificToDiverse => "specific_to_diverse".into(),
            Strategy::RandomOrder => "random".into(),
            Strategy::Fixed(l) => format!("fixed:{l}"),
            Strategy::AllLevels => "all_levels".into(),
            Strategy::Adaptive => "adaptive".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diverse_to_specific" => Ok(Strategy::DiverseToSpecific),
            "specific_to_diverse" => Ok(Strategy::SpecificToDiverse),
            "random" => Ok(Strategy::RandomOrder),
            "all_levels" => Ok(Strategy::AllLevels),
            "adaptive" => Ok(Strategy::Adaptive),
            other => {
                if let Some(rest) = other.strip_prefix("fixed:") {
                    let l: f64 = rest
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad fixed level '{rest}'")))?;
                    Ok(Strategy::Fixed(l))
                } else {
                    Err(Error::invalid(format!("unknown strategy '{other}'")))
                }
            }
        }
    }
}

/// Long-tail rebalancing: undersample non-tail reals at synthetic-bearing
/// stages so tail samples make up `fraction` of the stage dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRebalance {
    pub fraction: f64,
    pub classes: BTreeSet<u16>,
}

/// Cap on per-stage synthetic volume: `multiplier` times the hard-real count,
/// drawn per (stage, level). The draw never exceeds the generated pool, so
/// requesting more than exists saturates at the pool.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SyntheticScale {
    pub multiplier: f64,
    pub hard_count: usize,
}

/// Full curriculum recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub strategy: Strategy,
    pub grid: GuidanceGrid,
    pub train: TrainConfig,
    /// |D|: size of the adaptive probe's random real subset.
    pub probe_size: usize,
    pub validation_per_lambda: usize,
    pub tail: Option<TailRebalance>,
    pub scale: Option<SyntheticScale>,
    /// Study flag: restore parameters after the probe update instead of
    /// retaining it.
    pub rollback_probe: bool,
}

impl CurriculumConfig {
    pub fn new(strategy: Strategy, grid: GuidanceGrid, train: TrainConfig) -> Self {
        CurriculumConfig {
            strategy,
            grid,
            train,
            probe_size: 0,
            validation_per_lambda: 16,
            tail: None,
            scale: None,
            rollback_probe: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Strategy::Fixed(l) = self.strategy {
            if self.grid.index_of(l).is_none() {
                return Err(Error::invalid(format!(
                    "fixed level {l} is not on the guidance grid"
                )));
            }
        }
        Ok(())
    }
}

/// Ascending guidance schedule with equal durations; remainder epochs go to
/// the earliest levels. Requires at least one epoch per level.
pub fn guidance_schedule_linear(grid: &GuidanceGrid, e_cl: usize) -> Result<Vec<f64>> {
    let k = grid.len();
    if e_cl < k {
        return Err(Error::invalid(format!(
            "curriculum epochs {e_cl} cannot cover {k} guidance levels"
        )));
    }
    let base = e_cl / k;
    let remainder = e_cl % k;
    let mut out = Vec::with_capacity(e_cl);
    for (i, &lambda) in grid.levels().iter().enumerate() {
        let reps = base + usize::from(i < remainder);
        out.extend(std::iter::repeat(lambda).take(reps));
    }
    Ok(out)
}

/// Stage-lambda sequence for the non-adaptive strategies.
pub fn schedule_for_strategy(
    strategy: Strategy,
    grid: &GuidanceGrid,
    e_cl: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    match strategy {
        Strategy::DiverseToSpecific => guidance_schedule_linear(grid, e_cl),
        Strategy::SpecificToDiverse => {
            let mut s = guidance_schedule_linear(grid, e_cl)?;
            s.reverse();
            Ok(s)
        }
        Strategy::RandomOrder => {
            let base = guidance_schedule_linear(grid, e_cl)?;
            let mut r = rng::stream(seed, "schedule-shuffle", &[]);
            let perm = rng::permutation(&mut r, base.len());
            Ok(perm.into_iter().map(|i| base[i]).collect())
        }
        Strategy::Fixed(l) => Ok(vec![l; e_cl]),
        Strategy::AllLevels | Strategy::Adaptive => Err(Error::invalid(
            "strategy does not use a precomputed schedule",
        )),
    }
}

fn entry_as_image(e: &SpectrumEntry) -> LabeledImage {
    LabeledImage {
        image: e.image.clone(),
        label: e.label,
        origin: Origin::Synthetic,
        lambda: e.lambda,
        sample_id: e.entry_id,
    }
}

/// Seeded draw of up to `target` kept entries at one guidance level, capped
/// at the pool size.
fn pick_synthetic(
    pool: &[&SpectrumEntry],
    target: usize,
    seed: u64,
    stage: u64,
) -> Vec<LabeledImage> {
    let take = target.min(pool.len());
    if take == 0 {
        return Vec::new();
    }
    if take == pool.len() {
        return pool.iter().map(|e| entry_as_image(e)).collect();
    }
    let mut r = rng::stream(seed, "stage-synthetic", &[stage]);
    let picks = rng::sample_without_replacement(&mut r, pool.len(), take);
    picks.into_iter().map(|i| entry_as_image(pool[i])).collect()
}

/// Stage-assembly knobs shared by the runners.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub tail: Option<TailRebalance>,
    pub scale: Option<SyntheticScale>,
    pub seed: u64,
    pub stage: u64,
}

/// Outcome of one stage assembly.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageInfo {
    pub synthetic: usize,
    pub reals: usize,
    pub empty_level: bool,
    pub undersample_truncated: bool,
}

fn assemble_stage(
    synthetic: Vec<LabeledImage>,
    reals: &[&[LabeledImage]],
    opts: &StageOptions,
) -> Result<(Dataset, StageInfo)> {
    let mut info = StageInfo {
        synthetic: synthetic.len(),
        empty_level: synthetic.is_empty(),
        ..Default::default()
    };
    let mut out: Dataset = synthetic;
    for chunk in reals {
        out.extend(chunk.iter().cloned());
    }
    out.sort_by_key(|s| s.sample_id);
    // Rebalance only when the stage actually carries synthetic data; the
    // degenerate zero-synthetic stage is plain real training.
    if info.synthetic > 0 {
        if let Some(tail) = &opts.tail {
            let sub_seed = rng::derive_seed(opts.seed, "stage-undersample", &[opts.stage]);
            let (rebalanced, outcome) =
                undersample_nontail(&out, &tail.classes, tail.fraction, sub_seed)?;
            out = rebalanced;
            info.undersample_truncated = outcome.truncated;
        }
    }
    info.reals = out.iter().filter(|s| s.origin == Origin::Real).count();
    Ok((out, info))
}

/// Alg-2 stage dataset: kept entries at exactly lambda_e, all non-hard reals
/// and all hard reals, rebalanced in long-tail mode. An empty level falls
/// back to reals only (flagged).
pub fn stage_dataset_nonadaptive(
    lambda_e: f64,
    entries: &[SpectrumEntry],
    d_nh: &[LabeledImage],
    d_h: &[LabeledImage],
    opts: &StageOptions,
) -> Result<(Dataset, StageInfo)> {
    let pool: Vec<&SpectrumEntry> = entries
        .iter()
        .filter(|e| e.kept && e.lambda == lambda_e)
        .collect();
    let synthetic = match opts.scale {
        Some(scale) => {
            let target = (scale.multiplier * scale.hard_count as f64).round() as usize;
            pick_synthetic(&pool, target, opts.seed, opts.stage)
        }
        None => pool.iter().map(|e| entry_as_image(e)).collect(),
    };
    assemble_stage(synthetic, &[d_nh, d_h], opts)
}

/// All-level stage dataset: the scaled union over every grid level plus all
/// reals.
pub fn stage_dataset_all_levels(
    grid: &GuidanceGrid,
    entries: &[SpectrumEntry],
    d_nh: &[LabeledImage],
    d_h: &[LabeledImage],
    opts: &StageOptions,
) -> Result<(Dataset, StageInfo)> {
    let mut synthetic = Vec::new();
    for (idx, &lambda) in grid.levels().iter().enumerate() {
        let pool: Vec<&SpectrumEntry> = entries
            .iter()
            .filter(|e| e.kept && e.lambda == lambda)
            .collect();
        match opts.scale {
            Some(scale) => {
                let target = (scale.multiplier * scale.hard_count as f64).round() as usize;
                let sub = StageOptions {
                    stage: opts.stage * 1000 + idx as u64,
                    ..opts.clone()
                };
                synthetic.extend(pick_synthetic(&pool, target, sub.seed, sub.stage));
            }
            None => synthetic.extend(pool.iter().map(|e| entry_as_image(e))),
        }
    }
    assemble_stage(synthetic, &[d_nh, d_h], opts)
}

/// Per-level progress measured around the adaptive probe update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressReport {
    pub epoch: u64,
    pub p_bef: Vec<(f64, f64)>,
    pub p_aft: Vec<(f64, f64)>,
    pub chosen_lambda: f64,
    pub tie_broken: bool,
}

/// Per-level held-out validation subsets, disjoint from all training data.
/// The synthetic levels hold spectrum entries; level 1.0, when present,
/// holds original hard reals (the lambda = 1 rows stored alongside the
/// spectrum), which makes real data selectable by the adaptive probe.
#[derive(Debug, Clone)]
pub struct GuidanceValidationSet {
    pub per_lambda: Vec<(f64, Vec<LabeledImage>)>,
}

impl GuidanceValidationSet {
    pub fn size_per_lambda(&self) -> usize {
        self.per_lambda.first().map_or(0, |(_, v)| v.len())
    }
}

/// Carve an equal-sized validation subset per level out of the kept entries
/// and (when `d_h` is non-empty) the hard reals as the lambda = 1 level.
/// Returns (training entries, training hard reals, validation set); the
/// held-out items appear in no training set.
pub fn split_validation(
    entries: Vec<SpectrumEntry>,
    grid: &GuidanceGrid,
    d_h: &[LabeledImage],
    per_lambda: usize,
    seed: u64,
) -> Result<(Vec<SpectrumEntry>, Dataset, GuidanceValidationSet)> {
    let mut min_avail = usize::MAX;
    for (idx, &lambda) in grid.levels().iter().enumerate() {
        let avail = entries
            .iter()
            .filter(|e| e.kept && e.lambda_index == idx)
            .count();
        if avail == 0 {
            return Err(Error::invalid(format!(
                "no kept entries at guidance level {lambda}; cannot build a validation set"
            )));
        }
        min_avail = min_avail.min(avail);
    }
    if !d_h.is_empty() {
        // The real level must leave at least one training sample behind.
        min_avail = min_avail.min(d_h.len().saturating_sub(1).max(1));
    }
    let n = per_lambda.min(min_avail);
    let mut chosen: BTreeSet<SampleId> = BTreeSet::new();
    let mut per = Vec::with_capacity(grid.len() + 1);
    for (idx, &lambda) in grid.levels().iter().enumerate() {
        let pool: Vec<&SpectrumEntry> = entries
            .iter()
            .filter(|e| e.kept && e.lambda_index == idx)
            .collect();
        let mut r = rng::stream(seed, "validation-split", &[idx as u64]);
        let picks = rng::sample_without_replacement(&mut r, pool.len(), n);
        let mut subset: Vec<LabeledImage> =
            picks.iter().map(|&i| entry_as_image(pool[i])).collect();
        subset.sort_by_key(|s| s.sample_id);
        for e in &subset {
            chosen.insert(e.sample_id);
        }
        per.push((lambda, subset));
    }
    let mut train_hard: Dataset = d_h.to_vec();
    if !d_h.is_empty() {
        let mut r = rng::stream(seed, "validation-split-real", &[]);
        let picks = rng::sample_without_replacement(&mut r, d_h.len(), n.min(d_h.len()));
        let set: BTreeSet<usize> = picks.into_iter().collect();
        let mut subset: Vec<LabeledImage> = set.iter().map(|&i| d_h[i].clone()).collect();
        subset.sort_by_key(|s| s.sample_id);
        train_hard = d_h
            .iter()
            .enumerate()
            .filter(|(i, _)| !set.contains(i))
            .map(|(_, s)| s.clone())
            .collect();
        per.push((1.0, subset));
    }
    let train: Vec<SpectrumEntry> = entries
        .into_iter()
        .filter(|e| !chosen.contains(&e.entry_id))
        .collect();
    Ok((train, train_hard, GuidanceValidationSet { per_lambda: per }))
}

/// Mean ground-truth-class probability over a validation subset.
pub fn measure_confidence(clf: &Classifier, subset: &[LabeledImage]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptyInput("validation subset".into()));
    }
    let sum: f64 = subset
        .iter()
        .map(|s| predict_proba(clf, &s.image)[s.label as usize])
        .sum();
    Ok(sum / subset.len() as f64)
}

/// One adaptive probe: measure per-level confidence, train one epoch on a
/// seeded random real subset, measure again, pick the level with the largest
/// gain (smallest level on ties). The probe update is retained unless
/// `rollback` is set.
#[allow(clippy::too_many_arguments)]
pub fn probe_and_select(
    clf: &mut Classifier,
    validation: &GuidanceValidationSet,
    d_all: &[LabeledImage],
    probe_size: usize,
    train_cfg: &TrainConfig,
    stage: u64,
    rollback: bool,
) -> Result<ProgressReport> {
    if probe_size > d_all.len() {
        return Err(Error::invalid(format!(
            "probe size {probe_size} exceeds pool size {}",
            d_all.len()
        )));
    }
    let epoch = clf.epochs_trained;
    let mut p_bef = Vec::with_capacity(validation.per_lambda.len());
    for (lambda, subset) in &validation.per_lambda {
        p_bef.push((*lambda, measure_confidence(clf, subset)?));
    }
    let snapshot = if rollback { Some(clf.params.clone()) } else { None };
    if probe_size > 0 {
        let mut r = rng::stream(train_cfg.seed, "probe-sample", &[stage]);
        let picks = rng::sample_without_replacement(&mut r, d_all.len(), probe_size);
        let probe_set: Dataset = picks.into_iter().map(|i| d_all[i].clone()).collect();
        train_epochs(clf, &probe_set, train_cfg, 1)?;
    }
    let mut p_aft = Vec::with_capacity(validation.per_lambda.len());
    for (lambda, subset) in &validation.per_lambda {
        p_aft.push((*lambda, measure_confidence(clf, subset)?));
    }
    if let Some(params) = snapshot {
        clf.params = params;
    }
    // Argmax of the confidence delta; levels ascend, strict > keeps the
    // smallest level on ties.
    let mut best_idx = 0usize;
    let mut best_delta = f64::NEG_INFINITY;
    let mut max_count = 0usize;
    for (i, ((_, bef), (_, aft))) in p_bef.iter().zip(&p_aft).enumerate() {
        let delta = aft - bef;
        if delta > best_delta {
            best_delta = delta;
            best_idx = i;
            max_count = 1;
        } else if delta == best_delta {
            max_count += 1;
        }
    }
    Ok(ProgressReport {
        epoch,
        chosen_lambda: p_bef[best_idx].0,
        tie_broken: max_count > 1,
        p_bef,
        p_aft,
    })
}

/// Which phase of the run a stage belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StagePhase {
    Curriculum,
    Cooldown,
}

/// One trained stage of a curriculum run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub phase: StagePhase,
    pub strategy: String,
    pub lambda: Option<f64>,
    pub dataset_size: usize,
    pub info: StageInfo,
    pub train: EpochLog,
    pub progress: Option<ProgressReport>,
}

fn cooldown_phase(
    clf: &mut Classifier,
    cfg: &CurriculumConfig,
    train_cfg: &TrainConfig,
    pool: &Dataset,
    logs: &mut Vec<StageLog>,
) -> Result<()> {
    for e in cfg.train.curriculum_epochs..cfg.train.epochs {
        let tl = train_epochs(clf, pool, train_cfg, 1)?;
        logs.push(StageLog {
            stage: e,
            phase: StagePhase::Cooldown,
            strategy: cfg.strategy.name(),
            lambda: None,
            dataset_size: pool.len(),
            info: StageInfo {
                reals: pool.len(),
                ..Default::default()
            },
            train: tl.into_iter().next().unwrap(),
            progress: None,
        });
    }
    Ok(())
}

/// Alg-2 runner: curriculum epochs follow the strategy schedule, remaining
/// epochs train on the full real pool.
pub fn run_nonadaptive(
    clf: &mut Classifier,
    cfg: &CurriculumConfig,
    entries: &[SpectrumEntry],
    d_nh: &[LabeledImage],
    d_h: &[LabeledImage],
) -> Result<Vec<StageLog>> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Adaptive {
        return Err(Error::invalid("adaptive strategy requires run_adaptive"));
    }
    let e_cl = cfg.train.curriculum_epochs;
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    let plan: Option<Vec<f64>> = match cfg.strategy {
        Strategy::AllLevels => None,
        _ => {
            if e_cl > 0 {
                Some(schedule_for_strategy(
                    cfg.strategy,
                    &cfg.grid,
                    e_cl,
                    cfg.train.seed,
                )?)
            } else {
                None
            }
        }
    };
    for stage in 0..e_cl {
        let opts = StageOptions {
            tail: cfg.tail.clone(),
            scale: cfg.scale,
            seed: cfg.train.seed,
            stage: stage as u64,
        };
        let (dataset, lambda, info) = match cfg.strategy {
            Strategy::AllLevels => {
                let (d, i) = stage_dataset_all_levels(&cfg.grid, entries, d_nh, d_h, &opts)?;
                (d, None, i)
            }
            Strategy::Fixed(l) => {
                // Fixed-guidance ablation: hard reals are not re-added.
                let (d, i) = stage_dataset_nonadaptive(l, entries, d_nh, &[], &opts)?;
                (d, Some(l), i)
            }
            _ => {
                let l = plan.as_ref().unwrap()[stage];
                let (d, i) = stage_dataset_nonadaptive(l, entries, d_nh, d_h, &opts)?;
                (d, Some(l), i)
            }
        };
        let tl = train_epochs(clf, &dataset, &cfg.train, 1)?;
        logs.push(StageLog {
            stage,
            phase: StagePhase::Curriculum,
            strategy: cfg.strategy.name(),
            lambda,
            dataset_size: dataset.len(),
            info,
            train: tl.into_iter().next().unwrap(),
            progress: None,
        });
    }
    let mut pool: Dataset = d_nh.iter().chain(d_h.iter()).cloned().collect();
    pool.sort_by_key(|s| s.sample_id);
    cooldown_phase(clf, cfg, &cfg.train, &pool, &mut logs)?;
    Ok(logs)
}

/// Alg-3 runner: probe-then-train curriculum epochs, then a real-data
/// cool-down on the full pool.
pub fn run_adaptive(
    clf: &mut Classifier,
    cfg: &CurriculumConfig,
    entries: &[SpectrumEntry],
    d_nh: &[LabeledImage],
    d_all: &[LabeledImage],
    validation: &GuidanceValidationSet,
) -> Result<Vec<StageLog>> {
    cfg.validate()?;
    let e_cl = cfg.train.curriculum_epochs;
    // The probe adds one extra update per curriculum stage; stretch the
    // cosine horizon so decay spans the real number of updates.
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs + e_cl,
        ..cfg.train.clone()
    };
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    for stage in 0..e_cl {
        let report = probe_and_select(
            clf,
            validation,
            d_all,
            cfg.probe_size.min(d_all.len()),
            &train_cfg,
            stage as u64,
            cfg.rollback_probe,
        )?;
        let lambda = report.chosen_lambda;
        let opts = StageOptions {
            tail: cfg.tail.clone(),
            scale: cfg.scale,
            seed: cfg.train.seed,
            stage: stage as u64,
        };
        // Alg-3 stage set: chosen-level synthetic plus non-hard reals. The
        // lambda = 1 level selects the original hard reals, so its stage is
        // the full real pool.
        let (dataset, info) = if lambda >= 1.0 {
            let mut pool: Dataset = d_all.to_vec();
            pool.sort_by_key(|s| s.sample_id);
            let n = pool.len();
            (
                pool,
                StageInfo {
                    reals: n,
                    ..Default::default()
                },
            )
        } else {
            stage_dataset_nonadaptive(lambda, entries, d_nh, &[], &opts)?
        };
        let tl = train_epochs(clf, &dataset, &train_cfg, 1)?;
        logs.push(StageLog {
            stage,
            phase: StagePhase::Curriculum,
            strategy: cfg.strategy.name(),
            lambda: Some(lambda),
            dataset_size: dataset.len(),
            info,
            train: tl.into_iter().next().unwrap(),
            progress: Some(report),
        });
    }
    let mut pool: Dataset = d_all.to_vec();
    pool.sort_by_key(|s| s.sample_id);
    cooldown_phase(clf, cfg, &train_cfg, &pool, &mut logs)?;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::classifier::ClassifierSpec;
    use crate::data::SYNTHETIC_ID_BASE;
    use crate::image::ImageTensor;

    fn grid(levels: &[f64]) -> GuidanceGrid {
        GuidanceGrid::new(levels.to_vec()).unwrap()
    }

    #[test]
    fn linear_schedule_equal_durations() {
        let g = grid(&[0.0, 0.1, 0.3, 0.5]);
        let s = guidance_schedule_linear(&g, 8).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.1, 0.1, 0.3, 0.3, 0.5, 0.5]);
        let g2 = grid(&[0.0, 0.5]);
        assert_eq!(guidance_schedule_linear(&g2, 2).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn linear_schedule_remainder_to_earliest() {
        let g = grid(&[0.0, 0.1, 0.3]);
        let s = guidance_schedule_linear(&g, 4).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.1, 0.3]);
    }

    #[test]
    fn linear_schedule_rejects_short_budget() {
        let g = grid(&[0.0, 0.1, 0.3]);
        assert!(guidance_schedule_linear(&g, 2).is_err());
    }

    #[test]
    fn strategies_consume_identical_multisets() {
        let g = grid(&[0.0, 0.1, 0.3, 0.5]);
        let d2s = schedule_for_strategy(Strategy::DiverseToSpecific, &g, 10, 1).unwrap();
        let s2d = schedule_for_strategy(Strategy::SpecificToDiverse, &g, 10, 1).unwrap();
        let rnd = schedule_for_strategy(Strategy::RandomOrder, &g, 10, 1).unwrap();
        let sorted = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        assert_eq!(sorted(d2s.clone()), sorted(s2d.clone()));
        assert_eq!(sorted(d2s.clone()), sorted(rnd));
        assert_eq!(s2d, d2s.iter().rev().cloned().collect::<Vec<_>>());
    }

    fn toy_image(seed: u64) -> ImageTensor {
        let mut r = rng::stream(seed, "cur-img", &[]);
        ImageTensor::from_pixels(4, 4, (0..16).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn toy_reals(n: usize, label: u16, base: u64) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage::real(toy_image(base + i as u64), label, SampleId(base + i as u64)))
            .collect()
    }

    fn toy_entries(grid: &GuidanceGrid, per_level: usize, kept: bool) -> Vec<SpectrumEntry> {
        let mut out = Vec::new();
        let mut id = 0u64;
        for (idx, &lambda) in grid.levels().iter().enumerate() {
            for s in 0..per_level {
                out.push(SpectrumEntry {
                    entry_id: SampleId(SYNTHETIC_ID_BASE + id),
                    source_id: SampleId(s as u64),
                    label: 1,
                    lambda,
                    lambda_index: idx,
                    seed_index: s as u16,
                    image: toy_image(500 + id),
                    fidelity: 0.5,
                    kept,
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn stage_dataset_cardinality_and_flags() {
        let g = grid(&[0.0, 0.5]);
        let entries = toy_entries(&g, 3, true);
        let d_nh = toy_reals(5, 0, 1000);
        let d_h = toy_reals(2, 1, 2000);
        let opts = StageOptions::default();
        let (d, info) = stage_dataset_nonadaptive(0.5, &entries, &d_nh, &d_h, &opts).unwrap();
        assert_eq!(d.len(), 3 + 5 + 2);
        assert!(!info.empty_level);
        // Unknown level: reals only, flagged.
        let (d, info) = stage_dataset_nonadaptive(0.25, &entries, &d_nh, &d_h, &opts).unwrap();
        assert_eq!(d.len(), 7);
        assert!(info.empty_level);
    }

    #[test]
    fn stage_dataset_excludes_unkept_entries() {
        let g = grid(&[0.0, 0.5]);
        let mut entries = toy_entries(&g, 4, true);
        for e in entries.iter_mut().take(2) {
            e.kept = false;
        }
        let opts = StageOptions::default();
        let (d, _) = stage_dataset_nonadaptive(0.0, &entries, &[], &[], &opts).unwrap();
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|s| s.origin == Origin::Synthetic));
    }

    #[test]
    fn all_levels_stage_uses_every_level() {
        let g = grid(&[0.0, 0.3, 0.5]);
        let entries = toy_entries(&g, 2, true);
        let d_nh = toy_reals(4, 0, 1000);
        let d_h = toy_reals(1, 1, 2000);
        let opts = StageOptions::default();
        let (d, info) = stage_dataset_all_levels(&g, &entries, &d_nh, &d_h, &opts).unwrap();
        assert_eq!(d.len(), 6 + 5);
        assert_eq!(info.synthetic, 6);
    }

    #[test]
    fn scale_caps_and_recycles_the_pool() {
        let g = grid(&[0.0]);
        let entries = toy_entries(&g, 4, true);
        let mut opts = StageOptions {
            scale: Some(SyntheticScale {
                multiplier: 0.5,
                hard_count: 4,
            }),
            ..Default::default()
        };
        let (d, _) = stage_dataset_nonadaptive(0.0, &entries, &[], &[], &opts).unwrap();
        assert_eq!(d.len(), 2);
        // 3x of 4 hard reals asks for 12 from a pool of 4: capped at the pool.
        opts.scale = Some(SyntheticScale {
            multiplier: 3.0,
            hard_count: 4,
        });
        let (d, _) = stage_dataset_nonadaptive(0.0, &entries, &[], &[], &opts).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|s| s.origin == Origin::Synthetic));
        // Zero scale: no synthetic at all.
        opts.scale = Some(SyntheticScale {
            multiplier: 0.0,
            hard_count: 4,
        });
        let (d, info) = stage_dataset_nonadaptive(0.0, &entries, &[], &[], &opts).unwrap();
        assert!(d.is_empty());
        assert_eq!(info.synthetic, 0);
    }

    #[test]
    fn undersample_applies_only_with_synthetic() {
        let g = grid(&[0.0]);
        let entries = toy_entries(&g, 10, true); // label 1 = tail
        let d_nh = toy_reals(90, 0, 1000);
        let d_h = toy_reals(10, 1, 5000);
        let opts = StageOptions {
            tail: Some(TailRebalance {
                fraction: 0.5,
                classes: BTreeSet::from([1u16]),
            }),
            ..Default::default()
        };
        let (d, _) = stage_dataset_nonadaptive(0.0, &entries, &d_nh, &d_h, &opts).unwrap();
        // 20 tail (10 synthetic + 10 hard reals) and 20 non-tail.
        assert_eq!(d.len(), 40);
        let tail = d.iter().filter(|s| s.label == 1).count();
        assert_eq!(tail, 20);
        // Hard tail reals all survive rebalancing.
        for h in &d_h {
            assert!(d.iter().any(|s| s.sample_id == h.sample_id));
        }
    }

    #[test]
    fn validation_split_is_disjoint_and_equal_sized() {
        let g = grid(&[0.0, 0.3, 0.5]);
        let entries = toy_entries(&g, 10, true);
        let d_h = toy_reals(9, 1, 5000);
        let (train, train_hard, v) = split_validation(entries, &g, &d_h, 4, 9).unwrap();
        // Three synthetic levels plus the lambda = 1 real level.
        assert_eq!(v.per_lambda.len(), 4);
        assert_eq!(v.per_lambda.last().unwrap().0, 1.0);
        for (_, subset) in &v.per_lambda {
            assert_eq!(subset.len(), 4);
            for e in subset {
                assert!(!train.iter().any(|t| t.entry_id == e.sample_id));
                assert!(!train_hard.iter().any(|t| t.sample_id == e.sample_id));
            }
        }
        assert_eq!(train.len(), 30 - 12);
        assert_eq!(train_hard.len(), 9 - 4);
        // Without hard reals there is no real level.
        let entries = toy_entries(&g, 10, true);
        let (_, empty_hard, v) = split_validation(entries, &g, &[], 4, 9).unwrap();
        assert_eq!(v.per_lambda.len(), 3);
        assert!(empty_hard.is_empty());
    }

    #[test]
    fn validation_split_requires_kept_entries_everywhere() {
        let g = grid(&[0.0, 0.3]);
        let mut entries = toy_entries(&g, 3, true);
        for e in entries.iter_mut().filter(|e| e.lambda_index == 1) {
            e.kept = false;
        }
        assert!(split_validation(entries, &g, &[], 2, 9).is_err());
    }

    #[test]
    fn confidence_of_uniform_classifier() {
        let clf = Classifier::init(ClassifierSpec::new(4, 4, 10), 0);
        let subset = toy_reals(5, 3, 0);
        let c = measure_confidence(&clf, &subset).unwrap();
        assert!((c - 0.1).abs() < 1e-6);
        let single = measure_confidence(&clf, &subset[..1]).unwrap();
        assert!((single - 0.1).abs() < 1e-6);
        assert!(measure_confidence(&clf, &[]).is_err());
    }

    #[test]
    fn confidence_matches_brute_force_recomputation() {
        let mut clf = Classifier::init(ClassifierSpec::new(4, 4, 3), 1);
        let data = toy_reals(12, 1, 0);
        let cfg = TrainConfig {
            epochs: 2,
            curriculum_epochs: 0,
            batch_size: 4,
            learn_rate: 1e-2,
            seed: 3,
        };
        train_epochs(&mut clf, &data, &cfg, 2).unwrap();
        let subset = toy_reals(12, 1, 400);
        let fast = measure_confidence(&clf, &subset).unwrap();
        let mut brute = 0.0f64;
        for s in &subset {
            brute += predict_proba(&clf, &s.image)[s.label as usize];
        }
        brute /= subset.len() as f64;
        assert!((fast - brute).abs() < 1e-9);
    }

    fn adaptive_fixture() -> (
        Classifier,
        CurriculumConfig,
        Vec<SpectrumEntry>,
        Vec<LabeledImage>,
        Vec<LabeledImage>,
        GuidanceValidationSet,
    ) {
        let g = grid(&[0.3, 0.5, 0.7]);
        let entries = toy_entries(&g, 8, true);
        let d_nh = toy_reals(20, 0, 1000);
        let d_h = toy_reals(6, 1, 5000);
        let (train_entries, train_hard, v) = split_validation(entries, &g, &d_h, 3, 4).unwrap();
        let mut d_all = d_nh.clone();
        d_all.extend(train_hard.clone());
        let clf = Classifier::init(ClassifierSpec::new(4, 4, 3), 2);
        let cfg = CurriculumConfig {
            probe_size: 6,
            validation_per_lambda: 3,
            ..CurriculumConfig::new(
                Strategy::Adaptive,
                g,
                TrainConfig {
                    epochs: 5,
                    curriculum_epochs: 3,
                    batch_size: 8,
                    learn_rate: 1e-2,
                    seed: 7,
                },
            )
        };
        (clf, cfg, train_entries, d_nh, d_all, v)
    }

    #[test]
    fn adaptive_run_emits_one_report_per_stage() {
        let (mut clf, cfg, entries, d_nh, d_all, v) = adaptive_fixture();
        let logs = run_adaptive(&mut clf, &cfg, &entries, &d_nh, &d_all, &v).unwrap();
        assert_eq!(logs.len(), 5);
        let reports: Vec<&ProgressReport> =
            logs.iter().filter_map(|l| l.progress.as_ref()).collect();
        assert_eq!(reports.len(), 3);
        for (log, rep) in logs.iter().take(3).zip(&reports) {
            assert_eq!(log.lambda, Some(rep.chosen_lambda));
            // Selectable levels are the grid plus the lambda = 1 real level.
            assert!(
                cfg.grid.index_of(rep.chosen_lambda).is_some() || rep.chosen_lambda == 1.0,
                "chosen {} not selectable",
                rep.chosen_lambda
            );
            // Chosen level maximizes the delta.
            let deltas: Vec<f64> = rep
                .p_bef
                .iter()
                .zip(&rep.p_aft)
                .map(|((_, b), (_, a))| a - b)
                .collect();
            let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let chosen_idx = rep
                .p_bef
                .iter()
                .position(|(l, _)| *l == rep.chosen_lambda)
                .unwrap();
            assert_eq!(deltas[chosen_idx], max);
        }
    }

    #[test]
    fn frozen_classifier_always_ties_to_smallest_level() {
        let (mut clf, mut cfg, entries, d_nh, d_all, v) = adaptive_fixture();
        cfg.train.learn_rate = 0.0;
        let logs = run_adaptive(&mut clf, &cfg, &entries, &d_nh, &d_all, &v).unwrap();
        for rep in logs.iter().filter_map(|l| l.progress.as_ref()) {
            assert_eq!(rep.chosen_lambda, 0.3);
            assert!(rep.tie_broken);
            for ((_, b), (_, a)) in rep.p_bef.iter().zip(&rep.p_aft) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn zero_probe_size_is_a_degenerate_tie() {
        let (mut clf, mut cfg, _entries, _d_nh, d_all, v) = adaptive_fixture();
        cfg.probe_size = 0;
        let report = probe_and_select(&mut clf, &v, &d_all, 0, &cfg.train, 0, false).unwrap();
        assert_eq!(report.chosen_lambda, 0.3);
        assert!(report.tie_broken);
        for ((_, b), (_, a)) in report.p_bef.iter().zip(&report.p_aft) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rollback_flag_restores_parameters() {
        let (mut clf, cfg, _entries, _d_nh, d_all, v) = adaptive_fixture();
        let before = clf.params.clone();
        probe_and_select(&mut clf, &v, &d_all, 6, &cfg.train, 0, true).unwrap();
        assert_eq!(clf.params, before);
        probe_and_select(&mut clf, &v, &d_all, 6, &cfg.train, 0, false).unwrap();
        assert_ne!(clf.params, before);
    }

    #[test]
    fn zero_curriculum_equals_plain_training() {
        let g = grid(&[0.0, 0.5]);
        let entries = toy_entries(&g, 4, true);
        let d_nh = toy_reals(18, 0, 1000);
        let d_h = toy_reals(6, 1, 5000);
        let train = TrainConfig {
            epochs: 4,
            curriculum_epochs: 0,
            batch_size: 8,
            learn_rate: 1e-2,
            seed: 13,
        };
        let mut via_curriculum = Classifier::init(ClassifierSpec::new(4, 4, 3), 7);
        let cfg = CurriculumConfig::new(Strategy::DiverseToSpecific, g, train.clone());
        run_nonadaptive(&mut via_curriculum, &cfg, &entries, &d_nh, &d_h).unwrap();

        let mut plain = Classifier::init(ClassifierSpec::new(4, 4, 3), 7);
        let mut pool: Dataset = d_nh.iter().chain(d_h.iter()).cloned().collect();
        pool.sort_by_key(|s| s.sample_id);
        train_epochs(&mut plain, &pool, &train, 4).unwrap();
        assert_eq!(via_curriculum.params, plain.params);
    }

    #[test]
    fn nonadaptive_follows_linear_schedule_and_keeps_hard_reals() {
        let g = grid(&[0.0, 0.5]);
        let entries = toy_entries(&g, 4, true);
        let d_nh = toy_reals(10, 0, 1000);
        let d_h = toy_reals(3, 1, 5000);
        let train = TrainConfig {
            epochs: 6,
            curriculum_epochs: 4,
            batch_size: 8,
            learn_rate: 1e-2,
            seed: 3,
        };
        let mut clf = Classifier::init(ClassifierSpec::new(4, 4, 3), 7);
        let cfg = CurriculumConfig::new(Strategy::DiverseToSpecific, g.clone(), train);
        let logs = run_nonadaptive(&mut clf, &cfg, &entries, &d_nh, &d_h).unwrap();
        assert_eq!(logs.len(), 6);
        let lambdas: Vec<f64> = logs.iter().take(4).map(|l| l.lambda.unwrap()).collect();
        assert_eq!(
            lambdas,
            schedule_for_strategy(Strategy::DiverseToSpecific, &g, 4, 3).unwrap()
        );
        for log in logs.iter().take(4) {
            assert_eq!(log.dataset_size, 4 + 10 + 3);
        }
        for log in logs.iter().skip(4) {
            assert_eq!(log.phase, StagePhase::Cooldown);
            assert_eq!(log.dataset_size, 13);
        }
    }
}
