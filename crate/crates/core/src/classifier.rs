//! Small convolutional classifier, its training loop and hard-sample rules.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledImage, Origin};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn;
use crate::rng;

/// Architecture descriptor: one 3x3 conv layer (2x2 mean-pooled) feeding two
/// dense layers; the first dense layer is the penultimate embedding reused
/// by the fidelity filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl ClassifierSpec {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        ClassifierSpec {
            height,
            width,
            classes,
            channels: 8,
            embed_dim: 32,
        }
    }

    pub fn pooled_height(&self) -> usize {
        self.height / 2
    }

    pub fn pooled_width(&self) -> usize {
        self.width / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.channels * self.pooled_height() * self.pooled_width()
    }

    pub fn param_count(&self) -> usize {
        let f = self.feature_dim();
        self.channels * 9
            + self.channels
            + f * self.embed_dim
            + self.embed_dim
            + self.embed_dim * self.classes
            + self.classes
    }
}

#[derive(Debug, Clone, Copy)]
struct ClfLayout {
    conv_w: usize,
    conv_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

fn layout(spec: &ClassifierSpec) -> ClfLayout {
    let f = spec.feature_dim();
    let conv_w = 0;
    let conv_b = conv_w + spec.channels * 9;
    let w1 = conv_b + spec.channels;
    let b1 = w1 + f * spec.embed_dim;
    let w2 = b1 + spec.embed_dim;
    let b2 = w2 + spec.embed_dim * spec.classes;
    let total = b2 + spec.classes;
    ClfLayout {
        conv_w,
        conv_b,
        w1,
        b1,
        w2,
        b2,
        total,
    }
}

/// Trainable classifier with a flat f32 parameter vector and an epoch
/// counter driving the cosine learning-rate decay.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: Vec<f32>,
    pub epochs_trained: u64,
}

/// Training knobs. `epochs` is the full budget and sets the cosine horizon;
/// `curriculum_epochs` of it may be driven by a curriculum schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub curriculum_epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curriculum_epochs > self.epochs {
            return Err(Error::invalid(format!(
                "curriculum epochs {} exceed total epochs {}",
                self.curriculum_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            curriculum_epochs: 24,
            batch_size: 16,
            learn_rate: 2e-2,
            seed: 0,
        }
    }
}

/// One epoch of the training trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

struct ClfActivations {
    input: Vec<f64>,
    conv_pre: Vec<f64>,
    pooled: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    logits: Vec<f64>,
}

/// 2x2 mean pooling per channel; odd trailing rows/columns are dropped.
fn mean_pool(src: &[f64], h: usize, w: usize, channels: usize, out: &mut [f64]) {
    let (ph, pw) = (h / 2, w / 2);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let pout = &mut out[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let base = 2 * y * w + 2 * x;
                pout[y * pw + x] =
                    0.25 * (plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1]);
            }
        }
    }
}

/// Backward of `mean_pool`: spread each pooled gradient over its window.
fn mean_pool_backward(gout: &[f64], h: usize, w: usize, channels: usize, gin: &mut [f64]) {
    let (ph, pw) = (h / 2, w / 2);
    for v in gin.iter_mut() {
        *v = 0.0;
    }
    for c in 0..channels {
        let gplane = &gout[c * ph * pw..(c + 1) * ph * pw];
        let gi = &mut gin[c * h * w..(c + 1) * h * w];
        for y in 0..ph {
            for x in 0..pw {
                let g = 0.25 * gplane[y * pw + x];
                let base = 2 * y * w + 2 * x;
                gi[base] += g;
                gi[base + 1] += g;
                gi[base + w] += g;
                gi[base + w + 1] += g;
            }
        }
    }
}

impl Classifier {
    /// Fresh classifier. The final layer starts at zero so an untrained model
    /// predicts the uniform distribution.
    pub fn init(spec: ClassifierSpec, seed: u64) -> Self {
        let lay = layout(&spec);
        let mut params = vec![0.0f32; lay.total];
        let mut r = rng::stream(seed, "classifier-init", &[]);
        nn::init_dense(&mut r, &mut params[lay.conv_w..lay.conv_b], 9, spec.channels);
        nn::init_dense(
            &mut r,
            &mut params[lay.w1..lay.b1],
            spec.feature_dim(),
            spec.embed_dim,
        );
        // w2 and all biases stay zero.
        Classifier {
            spec,
            params,
            epochs_trained: 0,
        }
    }

    fn forward(&self, image: &ImageTensor) -> ClfActivations {
        let spec = &self.spec;
        let lay = layout(spec);
        let p = &self.params;
        let (h, w, c) = (spec.height, spec.width, spec.channels);
        let input = image.to_f64();
        let mut conv_pre = vec![0.0f64; c * h * w];
        nn::conv3x3_forward(
            &p[lay.conv_w..lay.conv_b],
            &p[lay.conv_b..lay.w1],
            &input,
            &mut conv_pre,
            h,
            w,
            c,
        );
        let mut conv_act = conv_pre.clone();
        nn::silu(&mut conv_act);
        let mut pooled = vec![0.0f64; spec.feature_dim()];
        mean_pool(&conv_act, h, w, c, &mut pooled);
        let mut pre1 = vec![0.0f64; spec.embed_dim];
        nn::linear_forward(
            &p[lay.w1..lay.b1],
            &p[lay.b1..lay.w2],
            &pooled,
            &mut pre1,
            spec.feature_dim(),
            spec.embed_dim,
        );
        let mut act1 = pre1.clone();
        nn::silu(&mut act1);
        let mut logits = vec![0.0f64; spec.classes];
        nn::linear_forward(
            &p[lay.w2..lay.b2],
            &p[lay.b2..],
            &act1,
            &mut logits,
            spec.embed_dim,
            spec.classes,
        );
        ClfActivations {
            input,
            conv_pre,
            pooled,
            pre1,
            act1,
            logits,
        }
    }

    fn backward(&self, acts: &ClfActivations, glogits: &[f64], grads: &mut [f64]) {
        let spec = &self.spec;
        let lay = layout(spec);
        let p = &self.params;
        let mut gact1 = vec![0.0f64; spec.embed_dim];
        {
            let (gw2, gb2) = grads[lay.w2..].split_at_mut(spec.embed_dim * spec.classes);
            nn::linear_backward(
                &p[lay.w2..lay.b2],
                &acts.act1,
                glogits,
                Some(&mut gact1),
                gw2,
                gb2,
                spec.embed_dim,
                spec.classes,
            );
        }
        let mut gpre1 = vec![0.0f64; spec.embed_dim];
        nn::silu_backward(&acts.pre1, &gact1, &mut gpre1);
        let mut gpooled = vec![0.0f64; spec.feature_dim()];
        {
            let (gw1, gb1) = grads[lay.w1..lay.w2].split_at_mut(spec.feature_dim() * spec.embed_dim);
            nn::linear_backward(
                &p[lay.w1..lay.b1],
                &acts.pooled,
                &gpre1,
                Some(&mut gpooled),
                gw1,
                gb1,
                spec.feature_dim(),
                spec.embed_dim,
            );
        }
        let full = spec.channels * spec.height * spec.width;
        let mut gconv_act = vec![0.0f64; full];
        mean_pool_backward(
            &gpooled,
            spec.height,
            spec.width,
            spec.channels,
            &mut gconv_act,
        );
        let mut gconv_pre = vec![0.0f64; full];
        nn::silu_backward(&acts.conv_pre, &gconv_act, &mut gconv_pre);
        {
            let (gcw, gcb) = grads[lay.conv_w..lay.w1].split_at_mut(spec.channels * 9);
            nn::conv3x3_backward(
                &p[lay.conv_w..lay.conv_b],
                &acts.input,
                &gconv_pre,
                None,
                gcw,
                gcb,
                spec.height,
                spec.width,
                spec.channels,
            );
        }
    }

    pub fn logits(&self, image: &ImageTensor) -> Vec<f64> {
        self.forward(image).logits
    }

    /// Penultimate-layer activation (the embedding reused by the filter).
    pub fn embedding(&self, image: &ImageTensor) -> Vec<f64> {
        self.forward(image).act1
    }

    /// Cross-entropy loss of one sample; used by the gradient-check oracle.
    pub fn sample_loss(&self, image: &ImageTensor, label: u16) -> f64 {
        nn::cross_entropy(&self.logits(image), label as usize).0
    }

    /// Analytic gradient of one sample's loss w.r.t. all parameters.
    pub fn sample_loss_grad(&self, image: &ImageTensor, label: u16) -> Vec<f64> {
        let acts = self.forward(image);
        let (_, glogits) = nn::cross_entropy(&acts.logits, label as usize);
        let mut grads = vec![0.0f64; self.params.len()];
        self.backward(&acts, &glogits, &mut grads);
        grads
    }
}

/// Softmax class probabilities; entries sum to 1 within float tolerance.
pub fn predict_proba(clf: &Classifier, image: &ImageTensor) -> Vec<f64> {
    nn::softmax(&clf.logits(image))
}

/// Top-1 prediction.
pub fn predict_class(clf: &Classifier, image: &ImageTensor) -> u16 {
    let logits = clf.logits(image);
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u16
}

/// Mini-batch SGD with seeded shuffling and cosine learning-rate decay.
/// Mutates `clf` in place and returns the per-epoch trace. `n = 0` leaves
/// the parameters untouched.
pub fn train_epochs(
    clf: &mut Classifier,
    data: &[LabeledImage],
    cfg: &TrainConfig,
    n: usize,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("classifier training set".into()));
    }
    let lay = layout(&clf.spec);
    let mut grads = vec![0.0f64; lay.total];
    let mut logs = Vec::with_capacity(n);
    for _ in 0..n {
        let epoch = clf.epochs_trained;
        let lr = nn::cosine_lr(cfg.learn_rate, epoch, cfg.epochs as u64);
        let mut r = rng::stream(cfg.seed, "clf-shuffle", &[epoch]);
        let order = rng::permutation(&mut r, data.len());
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            for g in grads.iter_mut() {
                *g = 0.0;
            }
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let sample = &data[i];
                let acts = clf.forward(&sample.image);
                let (loss, mut glogits) = nn::cross_entropy(&acts.logits, sample.label as usize);
                let argmax = acts
                    .logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == sample.label as usize {
                    correct += 1;
                }
                batch_loss += loss;
                let scale = 1.0 / chunk.len() as f64;
                for g in glogits.iter_mut() {
                    *g *= scale;
                }
                clf.backward(&acts, &glogits, &mut grads);
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "classifier loss became non-finite at epoch {epoch}"
                )));
            }
            nn::sgd_update(&mut clf.params, &grads, lr);
            loss_sum += batch_loss * chunk.len() as f64;
        }
        clf.epochs_trained += 1;
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            samples: data.len(),
        });
    }
    Ok(logs)
}

/// Hard set under the confidence rule: samples whose ground-truth-class
/// probability is strictly below `h_hard`, in input order.
pub fn identify_hard(
    clf: &Classifier,
    data: &[LabeledImage],
    h_hard: f64,
) -> Result<Vec<LabeledImage>> {
    if !(0.0..=1.0).contains(&h_hard) {
        return Err(Error::invalid(format!(
            "h_hard must lie in [0, 1], got {h_hard}"
        )));
    }
    Ok(data
        .iter()
        .filter(|s| predict_proba(clf, &s.image)[s.label as usize] < h_hard)
        .cloned()
        .collect())
}

/// Hard set under the long-tail rule: membership in a tail (few-group) class.
pub fn identify_hard_tail(data: &[LabeledImage], tail_classes: &BTreeSet<u16>) -> Vec<LabeledImage> {
    data.iter()
        .filter(|s| tail_classes.contains(&s.label) && s.origin == Origin::Real)
        .cloned()
        .collect()
}
