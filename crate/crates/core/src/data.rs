//! Glyph-world benchmark generator.
//!
//! Each class is a distinct 16x16 binary glyph grown from a seeded cellular
//! pattern. Images composite a pose variant of the glyph over a procedural
//! background texture with nuisance translation/rotation; the low-quality
//! variant corrupts a seeded fraction of training images with occlusion,
//! blur and additive noise. Everything is a pure function of (spec, seed).

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng;

pub const GLYPH_SIZE: usize = 16;
const VARIANT_ANGLES_DEG: [f64; 4] = [-12.0, -4.0, 4.0, 12.0];
const MIN_PROTO_HAMMING: usize = 48;

/// Unique sample identifier; synthetic samples live above `SYNTHETIC_ID_BASE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId(pub u64);

pub const SYNTHETIC_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Synthetic,
}

/// A labelled training/test image. Real samples always carry lambda = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: u16,
    pub origin: Origin,
    pub lambda: f64,
    pub sample_id: SampleId,
}

impl LabeledImage {
    pub fn real(image: ImageTensor, label: u16, sample_id: SampleId) -> Self {
        LabeledImage {
            image,
            label,
            origin: Origin::Real,
            lambda: 1.0,
            sample_id,
        }
    }
}

pub type Dataset = Vec<LabeledImage>;

/// Frequency group of a class within the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Corruption and background parameters for one domain. `param_set_id`
/// labels the set so train/OOD disjointness is checkable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionProfile {
    pub param_set_id: u32,
    pub occlusion_cover: (f64, f64),
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub bg_families: Vec<u32>,
}

impl CorruptionProfile {
    pub fn train_default() -> Self {
        CorruptionProfile {
            param_set_id: 0,
            occlusion_cover: (0.30, 0.60),
            blur_sigma: 0.7,
            noise_sigma: 0.06,
            bg_families: vec![0, 1, 2, 3],
        }
    }

    pub fn ood_default() -> Self {
        CorruptionProfile {
            param_set_id: 1,
            occlusion_cover: (0.35, 0.65),
            blur_sigma: 1.4,
            noise_sigma: 0.10,
            bg_families: vec![4, 5, 6, 7],
        }
    }
}

/// Benchmark recipe. `head_count` is the largest per-class train count; the
/// low-quality builder uses it as the balanced per-class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub head_count: usize,
    pub imbalance_ratio: f64,
    pub corrupt_fraction: f64,
    pub test_per_class: usize,
    pub train_profile: CorruptionProfile,
    pub ood_profile: CorruptionProfile,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn longtail(num_classes: usize, head_count: usize, imbalance_ratio: f64, seed: u64) -> Self {
        DatasetSpec {
            num_classes,
            head_count,
            imbalance_ratio,
            corrupt_fraction: 0.0,
            test_per_class: 50,
            train_profile: CorruptionProfile::train_default(),
            ood_profile: CorruptionProfile::ood_default(),
            seed,
        }
    }

    pub fn lowquality(num_classes: usize, per_class: usize, corrupt_fraction: f64, seed: u64) -> Self {
        DatasetSpec {
            num_classes,
            head_count: per_class,
            imbalance_ratio: 1.0,
            corrupt_fraction,
            test_per_class: 50,
            train_profile: CorruptionProfile::train_default(),
            ood_profile: CorruptionProfile::ood_default(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(Error::invalid("too many classes for u16 labels"));
        }
        if self.imbalance_ratio < 1.0 {
            return Err(Error::invalid("imbalance ratio must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::invalid("corrupt fraction must lie in [0, 1]"));
        }
        if self.train_profile.param_set_id == self.ood_profile.param_set_id {
            return Err(Error::invalid("train and OOD parameter set ids must differ"));
        }
        if self
            .train_profile
            .bg_families
            .iter()
            .any(|f| self.ood_profile.bg_families.contains(f))
        {
            return Err(Error::invalid("train and OOD background families must be disjoint"));
        }
        Ok(())
    }
}

/// Generated splits plus the class-frequency grouping.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
    pub group_of_class: Vec<Group>,
    pub train_counts: Vec<usize>,
}

impl DataBundle {
    pub fn tail_classes(&self) -> BTreeSet<u16> {
        self.group_of_class
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == Group::Few)
            .map(|(c, _)| c as u16)
            .collect()
    }
}

/// Per-class train counts: round(head * ratio^(-i / (K - 1))).
pub fn longtail_counts(head_count: usize, imbalance_ratio: f64, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    let counts: Vec<usize> = (0..num_classes)
        .map(|i| {
            let exp = -(i as f64) / (num_classes as f64 - 1.0);
            (head_count as f64 * imbalance_ratio.powf(exp)).round() as usize
        })
        .collect();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid(
            "profile yields a zero-count class; raise head_count or lower the ratio",
        ));
    }
    Ok(counts)
}

/// Standard frequency thresholds: many >= 100, medium 20..=99, few < 20.
pub fn assign_groups(counts: &[usize]) -> Vec<Group> {
    counts
        .iter()
        .map(|&c| {
            if c >= 100 {
                Group::Many
            } else if c >= 20 {
                Group::Medium
            } else {
                Group::Few
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Glyph shapes and rendering
// ---------------------------------------------------------------------------

/// Per-class binary prototypes with guaranteed pairwise separation.
#[derive(Debug, Clone)]
pub struct GlyphWorld {
    pub num_classes: usize,
    prototypes: Vec<Vec<bool>>,
}

fn cellular_mask(r: &mut ChaCha8Rng) -> Vec<bool> {
    let n = GLYPH_SIZE;
    let mut grid = vec![false; n * n];
    // Low-frequency stripe field biases the seeding so each glyph carries a
    // global shape signature on top of the cellular texture.
    let theta = rng::uniform(r, 0.0, std::f64::consts::PI);
    let freq = rng::uniform(r, 0.8, 1.8);
    let phase = rng::uniform(r, 0.0, std::f64::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    let center = (n as f64 - 1.0) / 2.0;
    for y in 2..n - 2 {
        for x in 2..n - 2 {
            let u = (x as f64 - center) * cos_t + (y as f64 - center) * sin_t;
            let p = 0.45 + 0.32 * (std::f64::consts::TAU * freq * u / n as f64 + phase).sin();
            grid[y * n + x] = r.random::<f64>() < p;
        }
    }
    // Two majority-smoothing passes keep blobby, connected shapes.
    for _ in 0..2 {
        let prev = grid.clone();
        for y in 2..n - 2 {
            for x in 2..n - 2 {
                let mut alive = 0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let yy = (y as i32 + dy) as usize;
                        let xx = (x as i32 + dx) as usize;
                        if prev[yy * n + xx] {
                            alive += 1;
                        }
                    }
                }
                grid[y * n + x] = alive >= 5;
            }
        }
    }
    grid
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl GlyphWorld {
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        let mut prototypes: Vec<Vec<bool>> = Vec::with_capacity(num_classes);
        for class in 0..num_classes {
            let mut accepted = None;
            for attempt in 0..2000u64 {
                let mut r = rng::stream(seed, "glyph-proto", &[class as u64, attempt]);
                let mask = cellular_mask(&mut r);
                let ones = mask.iter().filter(|&&m| m).count();
                if ones < 25 {
                    continue;
                }
                if prototypes.iter().all(|p| hamming(p, &mask) >= MIN_PROTO_HAMMING) {
                    accepted = Some(mask);
                    break;
                }
            }
            match accepted {
                Some(mask) => prototypes.push(mask),
                None => {
                    return Err(Error::invalid(format!(
                        "could not place a separated glyph for class {class}"
                    )))
                }
            }
        }
        Ok(GlyphWorld {
            num_classes,
            prototypes,
        })
    }

    pub fn prototype(&self, class: usize) -> &[bool] {
        &self.prototypes[class]
    }
}

/// Bilinear sample of a binary mask at continuous coordinates.
fn sample_mask(mask: &[bool], y: f64, x: f64) -> f64 {
    let n = GLYPH_SIZE as isize;
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || yy >= n || xx < 0 || xx >= n {
            0.0
        } else {
            mask[(yy * n + xx) as usize] as u8 as f64
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

/// Fixed texture parameters per family id (independent of the dataset seed).
fn bg_family_params(family: u32) -> (f64, f64, f64, f64, f64, f64, f64) {
    let mut r = rng::stream(0xB06_FA417, "bg-family", &[family as u64]);
    let fx1 = rng::uniform(&mut r, 0.5, 2.5);
    let fy1 = rng::uniform(&mut r, 0.5, 2.5);
    let fx2 = rng::uniform(&mut r, 1.0, 3.5);
    let fy2 = rng::uniform(&mut r, 1.0, 3.5);
    let amp1 = rng::uniform(&mut r, 0.04, 0.10);
    let amp2 = rng::uniform(&mut r, 0.03, 0.07);
    let base = rng::uniform(&mut r, 0.18, 0.30);
    (fx1, fy1, fx2, fy2, amp1, amp2, base)
}

struct RenderParams {
    variant: usize,
    angle_deg: f64,
    dx: f64,
    dy: f64,
    bg_family: u32,
    phase1: f64,
    phase2: f64,
    shade: f64,
}

fn draw_render_params(r: &mut ChaCha8Rng, families: &[u32]) -> RenderParams {
    RenderParams {
        variant: r.random_range(0..VARIANT_ANGLES_DEG.len()),
        angle_deg: rng::uniform(r, -15.0, 15.0),
        dx: rng::uniform(r, -2.0, 2.0),
        dy: rng::uniform(r, -2.0, 2.0),
        bg_family: families[r.random_range(0..families.len())],
        phase1: rng::uniform(r, 0.0, std::f64::consts::TAU),
        phase2: rng::uniform(r, 0.0, std::f64::consts::TAU),
        shade: rng::uniform(r, 0.0, 1.0),
    }
}

fn render_glyph(mask: &[bool], p: &RenderParams) -> ImageTensor {
    let n = GLYPH_SIZE;
    let center = (n as f64 - 1.0) / 2.0;
    let theta = (p.angle_deg + VARIANT_ANGLES_DEG[p.variant]).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let (fx1, fy1, fx2, fy2, amp1, amp2, base) = bg_family_params(p.bg_family);
    let glyph_level = 0.82 + 0.12 * p.shade;
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // Inverse map: undo translation, then rotation about the center.
            let ux = x as f64 - p.dx - center;
            let uy = y as f64 - p.dy - center;
            let sx = cos_t * ux + sin_t * uy + center;
            let sy = -sin_t * ux + cos_t * uy + center;
            let m = sample_mask(mask, sy, sx);
            let tau = std::f64::consts::TAU;
            let bg = base
                + amp1 * (tau * (fx1 * x as f64 + fy1 * y as f64) / n as f64 + p.phase1).sin()
                + amp2 * (tau * (fx2 * x as f64 - fy2 * y as f64) / n as f64 + p.phase2).cos();
            let v = bg * (1.0 - m) + glyph_level * m;
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    ImageTensor {
        height: n,
        width: n,
        pixels,
    }
}

fn gaussian_blur(img: &mut ImageTensor, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = 2i32;
    let mut kernel = Vec::with_capacity(5);
    for d in -radius..=radius {
        kernel.push((-(d as f64 * d as f64) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let (h, w) = (img.height as i32, img.width as i32);
    let src = img.pixels.clone();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let xx = (x + d).clamp(0, w - 1);
                acc += kernel[ki] * src[(y * w + xx) as usize] as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let yy = (y + d).clamp(0, h - 1);
                acc += kernel[ki] * tmp[(yy * w + x) as usize];
            }
            img.pixels[(y * w + x) as usize] = acc as f32;
        }
    }
}

fn apply_corruption(img: &mut ImageTensor, profile: &CorruptionProfile, r: &mut ChaCha8Rng) {
    // Occluding rectangle over the central glyph region, sized to cover a
    // seeded fraction of it.
    let region = 12.0f64; // glyphs are grown inside the central 12x12 cells
    let cover = rng::uniform(r, profile.occlusion_cover.0, profile.occlusion_cover.1);
    let area = cover * region * region;
    let aspect = rng::uniform(r, 0.6, 1.6);
    let rw = (area * aspect).sqrt().round().max(1.0) as usize;
    let rh = ((area / aspect).sqrt().round().max(1.0) as usize).min(GLYPH_SIZE);
    let rw = rw.min(GLYPH_SIZE);
    let max_y = GLYPH_SIZE - rh;
    let max_x = GLYPH_SIZE - rw;
    let oy = r.random_range(0..=max_y.min(12));
    let ox = r.random_range(0..=max_x.min(12));
    for y in oy..(oy + rh).min(GLYPH_SIZE) {
        for x in ox..(ox + rw).min(GLYPH_SIZE) {
            img.set(y, x, 0.05);
        }
    }
    gaussian_blur(img, profile.blur_sigma);
    if profile.noise_sigma > 0.0 {
        for p in img.pixels.iter_mut() {
            *p = (*p as f64 + profile.noise_sigma * rng::normal(r)) as f32;
        }
    }
    img.clamp_unit();
}

fn render_sample(
    world: &GlyphWorld,
    class: usize,
    spec: &DatasetSpec,
    profile: &CorruptionProfile,
    corrupt_fraction: f64,
    split_label: &str,
    index: u64,
) -> ImageTensor {
    let mut r = rng::stream(spec.seed, split_label, &[class as u64, index]);
    let params = draw_render_params(&mut r, &profile.bg_families);
    let mut img = render_glyph(world.prototype(class), &params);
    if corrupt_fraction > 0.0 {
        let mut rc = rng::stream(spec.seed, "corrupt", &[
            profile.param_set_id as u64,
            class as u64,
            index,
            hash_label(split_label),
        ]);
        if rc.random::<f64>() < corrupt_fraction {
            apply_corruption(&mut img, profile, &mut rc);
        }
    }
    img
}

fn hash_label(label: &str) -> u64 {
    rng::derive_seed(0, label, &[])
}

fn build_bundle(spec: &DatasetSpec, counts: Vec<usize>) -> Result<DataBundle> {
    spec.validate()?;
    let world = GlyphWorld::new(spec.num_classes, spec.seed)?;
    let mut next_id = 0u64;
    let mut take_id = || {
        let id = SampleId(next_id);
        next_id += 1;
        id
    };

    let mut train = Vec::new();
    for class in 0..spec.num_classes {
        for j in 0..counts[class] {
            let img = render_sample(
                &world,
                class,
                spec,
                &spec.train_profile,
                spec.corrupt_fraction,
                "train-sample",
                j as u64,
            );
            train.push(LabeledImage::real(img, class as u16, take_id()));
        }
    }

    let mut id_test = Vec::new();
    for class in 0..spec.num_classes {
        for j in 0..spec.test_per_class {
            let img = render_sample(
                &world,
                class,
                spec,
                &spec.train_profile,
                spec.corrupt_fraction,
                "id-test-sample",
                j as u64,
            );
            id_test.push(LabeledImage::real(img, class as u16, take_id()));
        }
    }

    let mut ood_test = Vec::new();
    for class in 0..spec.num_classes {
        for j in 0..spec.test_per_class {
            let img = render_sample(
                &world,
                class,
                spec,
                &spec.ood_profile,
                spec.corrupt_fraction,
                "ood-test-sample",
                j as u64,
            );
            ood_test.push(LabeledImage::real(img, class as u16, take_id()));
        }
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

/// Long-tail benchmark: geometric class-count decay, balanced test splits.
pub fn make_longtail_dataset(spec: &DatasetSpec) -> Result<DataBundle> {
    let counts = longtail_counts(spec.head_count, spec.imbalance_ratio, spec.num_classes)?;
    build_bundle(spec, counts)
}

/// Balanced benchmark with a corrupted fraction of training images; the OOD
/// test uses held-out corruption parameters and background families.
pub fn make_lowquality_dataset(spec: &DatasetSpec) -> Result<DataBundle> {
    let counts = vec![spec.head_count; spec.num_classes];
    build_bundle(spec, counts)
}

/// Balanced clean renders (no corruption), used to fit the fidelity filter.
pub fn clean_renders(spec: &DatasetSpec, per_class: usize, label: &str) -> Result<Dataset> {
    let world = GlyphWorld::new(spec.num_classes, spec.seed)?;
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    let mut id = 3 * SYNTHETIC_ID_BASE; // away from both real and synthetic ranges
    for class in 0..spec.num_classes {
        for j in 0..per_class {
            let mut r = rng::stream(spec.seed, label, &[class as u64, j as u64]);
            let params = draw_render_params(&mut r, &spec.train_profile.bg_families);
            let img = render_glyph(world.prototype(class), &params);
            out.push(LabeledImage::real(img, class as u16, SampleId(id)));
            id += 1;
        }
    }
    Ok(out)
}

/// Result of the tail-ratio rebalancing pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndersampleOutcome {
    pub kept_tail: usize,
    pub kept_nontail: usize,
    /// Set when the non-tail pool was smaller than the target and was kept whole.
    pub truncated: bool,
}

/// Keep every tail sample and a seeded uniform subset of non-tail samples
/// sized so tail samples make up `tail_fraction` of the result. If the
/// non-tail pool is too small it is kept whole and `truncated` is set.
pub fn undersample_nontail(
    data: &[LabeledImage],
    tail_classes: &BTreeSet<u16>,
    tail_fraction: f64,
    seed: u64,
) -> Result<(Dataset, UndersampleOutcome)> {
    if !(0.0..1.0).contains(&tail_fraction) || tail_fraction == 0.0 {
        return Err(Error::invalid(format!(
            "tail fraction must lie in (0, 1), got {tail_fraction}"
        )));
    }
    let (tail, nontail): (Vec<&LabeledImage>, Vec<&LabeledImage>) = data
        .iter()
        .partition(|s| tail_classes.contains(&s.label));
    if tail.is_empty() {
        return Err(Error::EmptyInput("tail set for undersampling".into()));
    }
    let n_t = tail.len();
    let target = (n_t as f64 * (1.0 - tail_fraction) / tail_fraction).round() as usize;
    let (picked, truncated) = if target >= nontail.len() {
        ((0..nontail.len()).collect::<Vec<_>>(), target > nontail.len())
    } else {
        let mut r = rng::stream(seed, "undersample", &[]);
        (rng::sample_without_replacement(&mut r, nontail.len(), target), false)
    };
    let mut out: Dataset = tail.into_iter().cloned().collect();
    out.extend(picked.iter().map(|&i| nontail[i].clone()));
    out.sort_by_key(|s| s.sample_id);
    let outcome = UndersampleOutcome {
        kept_tail: n_t,
        kept_nontail: out.len() - n_t,
        truncated,
    };
    Ok((out, outcome))
}
