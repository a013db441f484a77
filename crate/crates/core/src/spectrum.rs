//! Syn-to-real spectrum generation for hard samples, fidelity scoring and
//! threshold filtering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_epochs, Classifier, ClassifierSpec, TrainConfig};
use crate::data::{LabeledImage, SampleId, SYNTHETIC_ID_BASE};
use crate::diffusion::{generate_guided, ConditionId, GenerationConfig, NoiseModel, Sampler};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;
use crate::schedule::{GuidanceLevel, VarianceSchedule};

/// Sorted guidance levels, each in [0, 1). Rows at lambda = 1 are the hard
/// real originals and are carried separately by the curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceGrid {
    levels: Vec<f64>,
}

impl GuidanceGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("guidance grid must be non-empty"));
        }
        for pair in levels.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::invalid("guidance grid must be strictly increasing"));
            }
        }
        if levels.iter().any(|&l| !(0.0..1.0).contains(&l)) {
            return Err(Error::invalid("guidance levels must lie in [0, 1)"));
        }
        Ok(GuidanceGrid { levels })
    }

    /// Long-tail preset.
    pub fn longtail() -> Self {
        GuidanceGrid {
            levels: vec![0.0, 0.1, 0.3, 0.5],
        }
    }

    /// Low-quality preset.
    pub fn lowquality() -> Self {
        GuidanceGrid {
            levels: vec![0.5, 0.7, 0.9],
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn index_of(&self, lambda: f64) -> Option<usize> {
        self.levels.iter().position(|&l| l == lambda)
    }
}

/// One generated interpolation of a hard source image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub entry_id: SampleId,
    pub source_id: SampleId,
    pub label: u16,
    pub lambda: f64,
    pub lambda_index: usize,
    pub seed_index: u16,
    pub image: ImageTensor,
    pub fidelity: f32,
    pub kept: bool,
}

/// Generation knobs shared by every entry of one spectrum run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub seeds_per_image: usize,
    pub text_weight: f64,
    pub sampler: Sampler,
    pub ddim_steps: usize,
    pub global_seed: u64,
}

impl SpectrumConfig {
    pub fn new(seeds_per_image: usize, global_seed: u64) -> Self {
        SpectrumConfig {
            seeds_per_image,
            text_weight: 3.0,
            sampler: Sampler::Ddim,
            ddim_steps: 20,
            global_seed,
        }
    }
}

/// Generate |H| * |grid| * m entries in canonical (source, level, seed) order.
/// Each entry derives its own noise stream from (global_seed, source id,
/// level index, seed index), so results are identical for any worker count.
pub fn generate_spectrum(
    hard: &[LabeledImage],
    model: &NoiseModel,
    grid: &GuidanceGrid,
    cfg: &SpectrumConfig,
    schedule: &VarianceSchedule,
) -> Result<Vec<SpectrumEntry>> {
    if cfg.seeds_per_image == 0 {
        return Err(Error::invalid("seeds_per_image must be at least 1"));
    }
    let m = cfg.seeds_per_image;
    let levels = grid.levels();
    let total = hard.len() * levels.len() * m;
    let entries: Result<Vec<SpectrumEntry>> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let per_source = levels.len() * m;
            let src_idx = flat / per_source;
            let level_idx = (flat % per_source) / m;
            let seed_idx = flat % m;
            let source = &hard[src_idx];
            let lambda = levels[level_idx];
            let gen_seed = rng::derive_seed(
                cfg.global_seed,
                "spectrum",
                &[source.sample_id.0, level_idx as u64, seed_idx as u64],
            );
            let gen_cfg = GenerationConfig {
                text_weight: cfg.text_weight,
                lambda: GuidanceLevel::new(lambda)?,
                sampler: cfg.sampler,
                seed: gen_seed,
                ddim_steps: cfg.ddim_steps,
            };
            let image = generate_guided(
                model,
                &source.image,
                ConditionId::Class(source.label),
                &gen_cfg,
                schedule,
            )?;
            Ok(SpectrumEntry {
                entry_id: SampleId(SYNTHETIC_ID_BASE + flat as u64),
                source_id: source.sample_id,
                label: source.label,
                lambda,
                lambda_index: level_idx,
                seed_index: seed_idx as u16,
                image,
                fidelity: 0.0,
                kept: false,
            })
        })
        .collect();
    entries
}

/// Embedding network plus per-class reference embeddings. Embeddings are
/// centered by the training-set mean and L2-normalized; SiLU activations
/// live in a narrow positive cone, and centering spreads them over the
/// sphere so cosine scores discriminate.
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub embedder: Classifier,
    pub center: Vec<f64>,
    pub references: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        for x in v.iter_mut() {
            *x = 0.0;
        }
    }
}

impl FilterModel {
    /// Fit the embedding net on clean balanced renders, then freeze the mean
    /// embedding of each class as its reference.
    pub fn fit(clean: &[LabeledImage], num_classes: usize, seed: u64) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::EmptyInput("filter-model training set".into()));
        }
        let h = clean[0].image.height;
        let w = clean[0].image.width;
        let mut clf = Classifier::init(ClassifierSpec::new(h, w, num_classes), seed);
        let cfg = TrainConfig {
            epochs: 80,
            curriculum_epochs: 0,
            batch_size: 16,
            learn_rate: 2e-2,
            seed,
        };
        train_epochs(&mut clf, clean, &cfg, cfg.epochs)?;
        let mut center = vec![0.0f64; clf.spec.embed_dim];
        for sample in clean {
            for (acc, v) in center.iter_mut().zip(clf.embedding(&sample.image)) {
                *acc += v;
            }
        }
        for v in center.iter_mut() {
            *v /= clean.len() as f64;
        }
        let mut model = FilterModel {
            embedder: clf,
            center,
            references: vec![vec![0.0f64; 0]; num_classes],
        };
        let mut sums = vec![vec![0.0f64; model.embedder.spec.embed_dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for sample in clean {
            let e = model.embed(&sample.image);
            let c = sample.label as usize;
            for (acc, v) in sums[c].iter_mut().zip(&e) {
                *acc += v;
            }
            counts[c] += 1;
        }
        for (c, sum) in sums.iter_mut().enumerate() {
            if counts[c] == 0 {
                return Err(Error::invalid(format!(
                    "filter training set has no renders for class {c}"
                )));
            }
            for v in sum.iter_mut() {
                *v /= counts[c] as f64;
            }
            normalize(sum);
        }
        model.references = sums;
        Ok(model)
    }

    /// Centered, L2-normalized penultimate embedding.
    pub fn embed(&self, image: &ImageTensor) -> Vec<f64> {
        let mut e = self.embedder.embedding(image);
        for (v, m) in e.iter_mut().zip(&self.center) {
            *v -= m;
        }
        normalize(&mut e);
        e
    }
}

/// Cosine similarity between the image embedding and its class reference.
pub fn fidelity_score(filter: &FilterModel, image: &ImageTensor, label: u16) -> f64 {
    let e = filter.embed(image);
    e.iter()
        .zip(&filter.references[label as usize])
        .map(|(a, b)| a * b)
        .sum()
}

/// Score every entry in place (parallel; pure per entry).
pub fn score_spectrum(filter: &FilterModel, entries: &mut [SpectrumEntry]) {
    entries.par_iter_mut().for_each(|e| {
        e.fidelity = fidelity_score(filter, &e.image, e.label) as f32;
    });
}

/// Set kept flags: kept iff fidelity >= threshold. Discarded entries stay in
/// the cache for audit.
pub fn filter_spectrum(entries: &mut [SpectrumEntry], h_filter: f64) -> usize {
    let mut kept = 0usize;
    for e in entries.iter_mut() {
        e.kept = e.fidelity as f64 >= h_filter;
        if e.kept {
            kept += 1;
        }
    }
    kept
}

/// Per-run threshold calibration: the 10th percentile of clean-render
/// self-class scores.
pub fn calibrate_threshold(filter: &FilterModel, clean: &[LabeledImage]) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::EmptyInput("calibration set".into()));
    }
    let mut scores: Vec<f64> = clean
        .iter()
        .map(|s| fidelity_score(filter, &s.image, s.label))
        .collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((scores.len() as f64) * 0.10).floor() as usize;
    Ok(scores[idx.min(scores.len() - 1)])
}

/// Named filtering-threshold presets used by the ablation sweep.
pub fn threshold_preset(name: &str) -> Option<f64> {
    match name {
        "imagenet_lt" => Some(0.30),
        "iwildcam" => Some(0.25),
        _ => None,
    }
}

/// Mean fidelity per guidance level, in grid order (reporting helper).
pub fn mean_fidelity_by_level(entries: &[SpectrumEntry], grid: &GuidanceGrid) -> Vec<(f64, f64)> {
    grid.levels()
        .iter()
        .enumerate()
        .map(|(idx, &lambda)| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for e in entries.iter().filter(|e| e.lambda_index == idx) {
                sum += e.fidelity as f64;
                n += 1;
            }
            (lambda, if n == 0 { f64::NAN } else { sum / n as f64 })
        })
        .collect()
}
