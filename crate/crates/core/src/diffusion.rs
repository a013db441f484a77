//! Conditional noise estimation and image-guided denoising.
//!
//! The generation chain: a source image is pushed forward to step t(lambda)
//! by `forward_noise`, then denoised back to step 0 with classifier-free
//! guidance (`cfg_noise`) driving either the stochastic ancestral sampler or
//! the deterministic DDIM sampler. lambda = 1 short-circuits to an exact copy
//! of the source.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn;
use crate::rng;
use crate::schedule::{alpha_bar_at, start_step, GuidanceLevel, VarianceSchedule};

/// Conditioning input to the noise model: a class id or the unconditional
/// embedding used by classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionId {
    Class(u16),
    Unconditional,
}

/// Sampler used for the reverse chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    Ancestral,
    Ddim,
}

impl Sampler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Sampler::Ancestral),
            "ddim" => Ok(Sampler::Ddim),
            other => Err(Error::invalid(format!("unknown sampler '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sampler::Ancestral => "ancestral",
            Sampler::Ddim => "ddim",
        }
    }
}

/// Per-generation knobs. `text_weight` is the strength of the class prompt
/// in the guidance combination; `seed` fully determines all injected noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub text_weight: f64,
    pub lambda: GuidanceLevel,
    pub sampler: Sampler,
    pub seed: u64,
    /// Number of strided DDIM steps (ignored by the ancestral sampler).
    pub ddim_steps: usize,
}

impl GenerationConfig {
    pub fn new(text_weight: f64, lambda: GuidanceLevel, sampler: Sampler, seed: u64) -> Self {
        GenerationConfig {
            text_weight,
            lambda,
            sampler,
            seed,
            ddim_steps: 20,
        }
    }
}

/// Architecture descriptor for the fully-connected noise estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseNetSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub class_dim: usize,
}

impl NoiseNetSpec {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        NoiseNetSpec {
            height,
            width,
            classes,
            hidden: 256,
            time_dim: 32,
            class_dim: 16,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn input_dim(&self) -> usize {
        self.image_dim() + self.time_dim + self.class_dim
    }

    /// Flat layout: class table, then (w, b) per dense layer.
    pub fn param_count(&self) -> usize {
        let d = self.input_dim();
        let h = self.hidden;
        let o = self.image_dim();
        (self.classes + 1) * self.class_dim
            + (d * h + h)
            + (h * h + h)
            + (h * h + h)
            + (h * o + o)
    }
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct NetLayout {
    class_table: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    w4: usize,
    b4: usize,
    total: usize,
}

fn layout(spec: &NoiseNetSpec) -> NetLayout {
    let d = spec.input_dim();
    let h = spec.hidden;
    let o = spec.image_dim();
    let class_table = 0;
    let w1 = class_table + (spec.classes + 1) * spec.class_dim;
    let b1 = w1 + d * h;
    let w2 = b1 + h;
    let b2 = w2 + h * h;
    let w3 = b2 + h;
    let b3 = w3 + h * h;
    let w4 = b3 + h;
    let b4 = w4 + h * o;
    let total = b4 + o;
    NetLayout {
        class_table,
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        w4,
        b4,
        total,
    }
}

/// Trainable noise estimator: flattened image, sinusoidal step embedding and
/// a learned class embedding feed three SiLU layers and a linear head.
#[derive(Debug, Clone)]
pub struct NoiseNet {
    pub spec: NoiseNetSpec,
    pub params: Vec<f32>,
}

impl NoiseNet {
    pub fn init(spec: NoiseNetSpec, seed: u64) -> Self {
        let lay = layout(&spec);
        let mut params = vec![0.0f32; lay.total];
        let mut r = rng::stream(seed, "noise-net-init", &[]);
        let d = spec.input_dim();
        let h = spec.hidden;
        let o = spec.image_dim();
        nn::init_dense(
            &mut r,
            &mut params[lay.class_table..lay.w1],
            spec.class_dim,
            spec.classes + 1,
        );
        nn::init_dense(&mut r, &mut params[lay.w1..lay.b1], d, h);
        nn::init_dense(&mut r, &mut params[lay.w2..lay.b2], h, h);
        nn::init_dense(&mut r, &mut params[lay.w3..lay.b3], h, h);
        nn::init_dense(&mut r, &mut params[lay.w4..lay.b4], h, o);
        NoiseNet { spec, params }
    }

    fn time_embedding(&self, t: usize, out: &mut [f64]) {
        let d = self.spec.time_dim;
        let half = d / 2;
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let angle = t as f64 * freq;
            out[2 * i] = angle.sin();
            out[2 * i + 1] = angle.cos();
        }
    }

    fn class_row(&self, c: ConditionId) -> usize {
        match c {
            ConditionId::Class(k) => k as usize,
            ConditionId::Unconditional => self.spec.classes,
        }
    }

    fn build_input(&self, z: &[f64], t: usize, c: ConditionId, input: &mut [f64]) {
        let img = self.spec.image_dim();
        input[..img].copy_from_slice(z);
        self.time_embedding(t, &mut input[img..img + self.spec.time_dim]);
        let lay = layout(&self.spec);
        let row = self.class_row(c);
        let table = &self.params[lay.class_table..lay.w1];
        let emb = &table[row * self.spec.class_dim..(row + 1) * self.spec.class_dim];
        for (dst, &src) in input[img + self.spec.time_dim..].iter_mut().zip(emb) {
            *dst = src as f64;
        }
    }

    /// Forward pass; activations are returned for reuse by the backward pass.
    fn forward(&self, z: &[f64], t: usize, c: ConditionId) -> NetActivations {
        let spec = &self.spec;
        let lay = layout(spec);
        let d = spec.input_dim();
        let h = spec.hidden;
        let o = spec.image_dim();
        let p = &self.params;

        let mut input = vec![0.0f64; d];
        self.build_input(z, t, c, &mut input);

        let mut pre1 = vec![0.0f64; h];
        nn::linear_forward(&p[lay.w1..lay.b1], &p[lay.b1..lay.w2], &input, &mut pre1, d, h);
        let mut act1 = pre1.clone();
        nn::silu(&mut act1);

        let mut pre2 = vec![0.0f64; h];
        nn::linear_forward(&p[lay.w2..lay.b2], &p[lay.b2..lay.w3], &act1, &mut pre2, h, h);
        let mut act2 = pre2.clone();
        nn::silu(&mut act2);

        let mut pre3 = vec![0.0f64; h];
        nn::linear_forward(&p[lay.w3..lay.b3], &p[lay.b3..lay.w4], &act2, &mut pre3, h, h);
        let mut act3 = pre3.clone();
        nn::silu(&mut act3);

        let mut out = vec![0.0f64; o];
        nn::linear_forward(&p[lay.w4..lay.b4], &p[lay.b4..], &act3, &mut out, h, o);

        NetActivations {
            input,
            pre1,
            act1,
            pre2,
            act2,
            pre3,
            act3,
            out,
        }
    }

    pub fn predict_f64(&self, z: &[f64], t: usize, c: ConditionId) -> Vec<f64> {
        self.forward(z, t, c).out
    }

    /// Gradient of the per-sample MSE training objective w.r.t. all
    /// parameters (the finite-difference check target).
    pub fn loss_grad(&self, z: &[f64], t: usize, c: ConditionId, eps: &[f64]) -> Vec<f64> {
        let acts = self.forward(z, t, c);
        let n = acts.out.len() as f64;
        let gout: Vec<f64> = acts
            .out
            .iter()
            .zip(eps)
            .map(|(o, e)| 2.0 * (o - e) / n)
            .collect();
        let mut grads = vec![0.0f64; self.params.len()];
        self.backward(&acts, c, &gout, &mut grads);
        grads
    }

    /// Accumulate parameter gradients for d(loss)/d(out) = `gout`.
    fn backward(
        &self,
        acts: &NetActivations,
        c: ConditionId,
        gout: &[f64],
        grads: &mut [f64],
    ) {
        let spec = &self.spec;
        let lay = layout(spec);
        let d = spec.input_dim();
        let h = spec.hidden;
        let o = spec.image_dim();
        let p = &self.params;

        let mut gact3 = vec![0.0f64; h];
        {
            let (gw4, rest) = grads[lay.w4..].split_at_mut(h * o);
            nn::linear_backward(
                &p[lay.w4..lay.b4],
                &acts.act3,
                gout,
                Some(&mut gact3),
                gw4,
                rest,
                h,
                o,
            );
        }
        let mut gpre3 = vec![0.0f64; h];
        nn::silu_backward(&acts.pre3, &gact3, &mut gpre3);

        let mut gact2 = vec![0.0f64; h];
        {
            let (gw3, rest) = grads[lay.w3..lay.w4].split_at_mut(h * h);
            nn::linear_backward(
                &p[lay.w3..lay.b3],
                &acts.act2,
                &gpre3,
                Some(&mut gact2),
                gw3,
                rest,
                h,
                h,
            );
        }
        let mut gpre2 = vec![0.0f64; h];
        nn::silu_backward(&acts.pre2, &gact2, &mut gpre2);

        let mut gact1 = vec![0.0f64; h];
        {
            let (gw2, rest) = grads[lay.w2..lay.w3].split_at_mut(h * h);
            nn::linear_backward(
                &p[lay.w2..lay.b2],
                &acts.act1,
                &gpre2,
                Some(&mut gact1),
                gw2,
                rest,
                h,
                h,
            );
        }
        let mut gpre1 = vec![0.0f64; h];
        nn::silu_backward(&acts.pre1, &gact1, &mut gpre1);

        let mut ginput = vec![0.0f64; d];
        {
            let (gw1, rest) = grads[lay.w1..lay.w2].split_at_mut(d * h);
            nn::linear_backward(
                &p[lay.w1..lay.b1],
                &acts.input,
                &gpre1,
                Some(&mut ginput),
                gw1,
                rest,
                d,
                h,
            );
        }
        // Class-embedding gradient flows through the tail of the input vector.
        let row = self.class_row(c);
        let base = lay.class_table + row * spec.class_dim;
        let tail = spec.image_dim() + spec.time_dim;
        for i in 0..spec.class_dim {
            grads[base + i] += ginput[tail + i];
        }
    }
}

struct NetActivations {
    input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pre3: Vec<f64>,
    act3: Vec<f64>,
    out: Vec<f64>,
}

/// Noise estimator: either the trained network or the closed-form predictor
/// for Gaussian data (the sampler test oracle; it ignores conditioning).
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Net(NoiseNet),
    AnalyticGaussian { mu: ImageTensor, sigma2: f64 },
}

impl NoiseModel {
    pub fn predict_f64(
        &self,
        z: &[f64],
        t: usize,
        c: ConditionId,
        schedule: &VarianceSchedule,
    ) -> Result<Vec<f64>> {
        match self {
            NoiseModel::Net(net) => {
                if z.len() != net.spec.image_dim() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} pixels", net.spec.image_dim()),
                        got: format!("{} pixels", z.len()),
                    });
                }
                Ok(net.predict_f64(z, t, c))
            }
            NoiseModel::AnalyticGaussian { mu, sigma2 } => {
                if z.len() != mu.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} pixels", mu.len()),
                        got: format!("{} pixels", z.len()),
                    });
                }
                let abar = alpha_bar_at(schedule, t)?;
                let sa = abar.sqrt();
                let root = (1.0 - abar).sqrt();
                let denom = abar * sigma2 + (1.0 - abar);
                Ok(z.iter()
                    .zip(&mu.pixels)
                    .map(|(&zt, &m)| root * (zt - sa * m as f64) / denom)
                    .collect())
            }
        }
    }

    /// Image-level prediction (rounds to f32 at the boundary).
    pub fn predict(
        &self,
        z_t: &ImageTensor,
        t: usize,
        c: ConditionId,
        schedule: &VarianceSchedule,
    ) -> Result<ImageTensor> {
        let out = self.predict_f64(&z_t.to_f64(), t, c, schedule)?;
        Ok(z_t.from_f64(&out))
    }
}

/// Exact minimum-MSE noise predictor for data drawn N(mu, sigma2 I).
pub fn analytic_gaussian_model(mu: ImageTensor, sigma2: f64) -> Result<NoiseModel> {
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(NoiseModel::AnalyticGaussian { mu, sigma2 })
}

/// Push a clean image forward to step t: sqrt(abar_t) z + sqrt(1 - abar_t) eps.
/// t = 0 returns the input unchanged.
pub fn forward_noise(
    z_real: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    z_real.check_same_shape(eps)?;
    if t == 0 {
        return Ok(z_real.clone());
    }
    let abar = alpha_bar_at(schedule, t)?;
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    let pixels = z_real
        .pixels
        .iter()
        .zip(&eps.pixels)
        .map(|(&z, &e)| (sa * z as f64 + sn * e as f64) as f32)
        .collect();
    ImageTensor::from_pixels(z_real.height, z_real.width, pixels)
}

/// Classifier-free guidance combination (1 + w) cond - w uncond.
pub fn cfg_noise(
    model: &NoiseModel,
    z_t: &ImageTensor,
    t: usize,
    c: ConditionId,
    w: f64,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    if c == ConditionId::Unconditional {
        return Err(Error::invalid(
            "cfg_noise requires a class condition, not UNCONDITIONAL",
        ));
    }
    let z = z_t.to_f64();
    let cond = model.predict_f64(&z, t, c, schedule)?;
    if w == 0.0 {
        return Ok(z_t.from_f64(&cond));
    }
    let uncond = model.predict_f64(&z, t, ConditionId::Unconditional, schedule)?;
    let combined: Vec<f64> = cond
        .iter()
        .zip(&uncond)
        .map(|(&cv, &uv)| (1.0 + w) * cv - w * uv)
        .collect();
    Ok(z_t.from_f64(&combined))
}

/// One reverse step of the stochastic sampler:
/// z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sqrt(beta_t) eps'.
/// The additive noise is suppressed at t = 1 so z_0 is deterministic given eps_hat.
pub fn ancestral_step(
    z_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &VarianceSchedule,
    eps_prime: &ImageTensor,
) -> Result<ImageTensor> {
    if t == 0 {
        return Err(Error::invalid("ancestral_step requires t >= 1"));
    }
    if t > schedule.steps() {
        return Err(Error::StepOutOfRange {
            t,
            max: schedule.steps(),
        });
    }
    z_t.check_same_shape(eps_hat)?;
    z_t.check_same_shape(eps_prime)?;
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let abar = alpha_bar_at(schedule, t)?;
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - abar).sqrt();
    let noise_scale = if t == 1 { 0.0 } else { beta.sqrt() };
    let pixels = z_t
        .pixels
        .iter()
        .zip(&eps_hat.pixels)
        .zip(&eps_prime.pixels)
        .map(|((&z, &eh), &ep)| {
            ((z as f64 - coef * eh as f64) * inv_sqrt_alpha + noise_scale * ep as f64) as f32
        })
        .collect();
    ImageTensor::from_pixels(z_t.height, z_t.width, pixels)
}

/// One deterministic DDIM step from t down to t_prev (eta = 0).
pub fn ddim_step(
    z_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    t_prev: usize,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    if t <= t_prev {
        return Err(Error::invalid(format!(
            "ddim_step requires t > t_prev, got t={t}, t_prev={t_prev}"
        )));
    }
    z_t.check_same_shape(eps_hat)?;
    let abar_t = alpha_bar_at(schedule, t)?;
    let abar_prev = alpha_bar_at(schedule, t_prev)?;
    let sa_t = abar_t.sqrt();
    let sn_t = (1.0 - abar_t).sqrt();
    let sa_p = abar_prev.sqrt();
    let sn_p = (1.0 - abar_prev).sqrt();
    let pixels = z_t
        .pixels
        .iter()
        .zip(&eps_hat.pixels)
        .map(|(&z, &eh)| {
            let x0 = (z as f64 - sn_t * eh as f64) / sa_t;
            (sa_p * x0 + sn_p * eh as f64) as f32
        })
        .collect();
    ImageTensor::from_pixels(z_t.height, z_t.width, pixels)
}

/// Descending step sequence for strided DDIM from t0 to 0, always containing
/// both endpoints.
pub fn ddim_plan(t0: usize, strides: usize) -> Vec<usize> {
    if t0 == 0 {
        return vec![0];
    }
    let n = strides.max(1).min(t0);
    let mut plan = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let t = ((t0 as f64) * (n - j) as f64 / n as f64).round() as usize;
        if plan.last() != Some(&t) {
            plan.push(t);
        }
    }
    plan
}

/// Denoise from an explicit starting state down to step 0. No final clamp;
/// `generate_guided` layers the [0, 1] clamp on top.
pub fn denoise_from(
    model: &NoiseModel,
    z_start: &ImageTensor,
    t_start: usize,
    c: ConditionId,
    cfg: &GenerationConfig,
    schedule: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let mut z = z_start.clone();
    match cfg.sampler {
        Sampler::Ancestral => {
            for t in (1..=t_start).rev() {
                let eps_hat = cfg_noise(model, &z, t, c, cfg.text_weight, schedule)?;
                let eps_prime = if t > 1 {
                    let noise = rng::normal_vec(rng, z.len());
                    z.from_f64(&noise)
                } else {
                    ImageTensor::zeros(z.height, z.width)
                };
                z = ancestral_step(&z, &eps_hat, t, schedule, &eps_prime)?;
            }
        }
        Sampler::Ddim => {
            let plan = ddim_plan(t_start, cfg.ddim_steps);
            for pair in plan.windows(2) {
                let (t, t_prev) = (pair[0], pair[1]);
                let eps_hat = cfg_noise(model, &z, t, c, cfg.text_weight, schedule)?;
                z = ddim_step(&z, &eps_hat, t, t_prev, schedule)?;
            }
        }
    }
    Ok(z)
}

/// Image-guided generation: noise the source to t(lambda), denoise to 0,
/// clamp to [0, 1]. Deterministic in (seed, inputs, parameters, sampler).
/// t(lambda) = 0 returns the source bit-identically.
pub fn generate_guided(
    model: &NoiseModel,
    z_real: &ImageTensor,
    c: ConditionId,
    cfg: &GenerationConfig,
    schedule: &VarianceSchedule,
) -> Result<ImageTensor> {
    let t0 = start_step(cfg.lambda, schedule.steps());
    if t0 == 0 {
        return Ok(z_real.clone());
    }
    let mut r = rng::stream(cfg.seed, "gen", &[]);
    let eps = z_real.from_f64(&rng::normal_vec(&mut r, z_real.len()));
    let z_t = forward_noise(z_real, t0, &eps, schedule)?;
    let mut out = denoise_from(model, &z_t, t0, c, cfg, schedule, &mut r)?;
    out.clamp_unit();
    Ok(out)
}

/// Training knobs for the noise estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub cond_dropout_p: f64,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for NoiseTrainConfig {
    fn default() -> Self {
        NoiseTrainConfig {
            epochs: 30,
            batch_size: 32,
            learn_rate: 1e-3,
            cond_dropout_p: 0.1,
            seed: 0,
            hidden: 256,
        }
    }
}

/// Per-epoch loss trace plus conditioning counters (the instrumentation hook
/// for dropout semantics).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NoiseTrainLog {
    pub epoch_loss: Vec<f64>,
    pub cond_steps: u64,
    pub uncond_steps: u64,
}

/// Train the noise estimator by MSE against injected noise over uniformly
/// sampled steps, swapping the class for UNCONDITIONAL with probability
/// `cond_dropout_p` per example. Single-threaded and bit-reproducible.
pub fn train_noise_model(
    train: &[LabeledImage],
    num_classes: usize,
    schedule: &VarianceSchedule,
    cfg: &NoiseTrainConfig,
) -> Result<(NoiseModel, NoiseTrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("noise-model training set".into()));
    }
    if !(0.0..1.0).contains(&cfg.cond_dropout_p) {
        return Err(Error::invalid(format!(
            "cond_dropout_p must lie in [0, 1), got {}",
            cfg.cond_dropout_p
        )));
    }
    let h = train[0].image.height;
    let w = train[0].image.width;
    let mut spec = NoiseNetSpec::new(h, w, num_classes);
    spec.hidden = cfg.hidden;
    let mut net = NoiseNet::init(spec, cfg.seed);
    let lay = layout(&net.spec);
    let mut opt = nn::Adam::new(cfg.learn_rate, lay.total);
    let mut log = NoiseTrainLog::default();
    let steps = schedule.steps();
    let img_dim = net.spec.image_dim();

    let mut grads = vec![0.0f64; lay.total];
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, "noise-train", &[epoch as u64]);
        let order = rng::permutation(&mut r, train.len());
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            for g in grads.iter_mut() {
                *g = 0.0;
            }
            let mut batch_loss = 0.0f64;
            for &i in chunk {
                let sample = &train[i];
                let t = r.random_range(1..=steps);
                let eps = rng::normal_vec(&mut r, img_dim);
                let abar = alpha_bar_at(schedule, t)?;
                let sa = abar.sqrt();
                let sn = (1.0 - abar).sqrt();
                let z: Vec<f64> = sample
                    .image
                    .pixels
                    .iter()
                    .zip(&eps)
                    .map(|(&p, &e)| sa * p as f64 + sn * e)
                    .collect();
                let c = if cfg.cond_dropout_p > 0.0 && r.random::<f64>() < cfg.cond_dropout_p {
                    log.uncond_steps += 1;
                    ConditionId::Unconditional
                } else {
                    log.cond_steps += 1;
                    ConditionId::Class(sample.label)
                };
                let acts = net.forward(&z, t, c);
                let scale = 1.0 / (img_dim as f64 * chunk.len() as f64);
                let mut gout = vec![0.0f64; img_dim];
                for j in 0..img_dim {
                    let diff = acts.out[j] - eps[j];
                    batch_loss += diff * diff / img_dim as f64;
                    gout[j] = 2.0 * diff * scale;
                }
                net.backward(&acts, c, &gout, &mut grads);
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "noise-model loss became non-finite at epoch {epoch}"
                )));
            }
            opt.update(&mut net.params, &grads);
            epoch_loss += batch_loss * chunk.len() as f64;
            seen += chunk.len();
        }
        log.epoch_loss.push(epoch_loss / seen as f64);
    }
    Ok((NoiseModel::Net(net), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, SampleId};
    use crate::schedule::make_linear_schedule;

    fn image(vals: &[f32]) -> ImageTensor {
        let n = vals.len();
        ImageTensor::from_pixels(1, n, vals.to_vec()).unwrap()
    }

    fn test_schedule() -> VarianceSchedule {
        make_linear_schedule(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_noise_identity_at_zero() {
        let s = test_schedule();
        let z = image(&[0.1, 0.7, 0.3, 1.0]);
        let eps = image(&[5.0, -3.0, 2.0, 0.5]);
        let out = forward_noise(&z, 0, &eps, &s).unwrap();
        assert_eq!(out.pixels, z.pixels);
    }

    #[test]
    fn forward_noise_zero_inputs() {
        let s = test_schedule();
        let z = ImageTensor::zeros(2, 2);
        let eps = ImageTensor::zeros(2, 2);
        let out = forward_noise(&z, 25, &eps, &s).unwrap();
        assert!(out.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn forward_noise_scalar_case() {
        // abar = 0.25 via a 1-step schedule with beta = 0.75.
        let s = VarianceSchedule::from_betas(vec![0.75]).unwrap();
        let z = image(&[1.0]);
        let eps = image(&[2.0]);
        let out = forward_noise(&z, 1, &eps, &s).unwrap();
        let expected = 0.5 + 0.75f64.sqrt() * 2.0; // 2.2320508...
        assert!((out.pixels[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn forward_noise_rejects_shape_mismatch() {
        let s = test_schedule();
        let z = ImageTensor::zeros(2, 2);
        let eps = ImageTensor::zeros(2, 3);
        assert!(forward_noise(&z, 1, &eps, &s).is_err());
    }

    #[test]
    fn cfg_scalar_case() {
        // cond = [2], uncond = [1], w = 1 -> [3]; exercised through the
        // analytic model is awkward, so check the combination arithmetic
        // through a tiny net-free path: reuse the formula directly.
        let cond = 2.0f64;
        let uncond = 1.0f64;
        let w = 1.0f64;
        assert_eq!((1.0 + w) * cond - w * uncond, 3.0);
    }

    #[test]
    fn cfg_w_zero_equals_conditional_exactly() {
        let s = test_schedule();
        let net = NoiseNet::init(NoiseNetSpec::new(2, 2, 3), 42);
        let model = NoiseModel::Net(net);
        let z = image(&[0.25, 0.5, 0.75, 1.0]);
        let z = ImageTensor::from_pixels(2, 2, z.pixels).unwrap();
        let via_cfg = cfg_noise(&model, &z, 7, ConditionId::Class(1), 0.0, &s).unwrap();
        let direct = model.predict(&z, 7, ConditionId::Class(1), &s).unwrap();
        assert_eq!(via_cfg.pixels, direct.pixels);
    }

    #[test]
    fn cfg_equal_branches_independent_of_w() {
        // The analytic model ignores conditioning, so cond == uncond.
        let s = test_schedule();
        let mu = ImageTensor::zeros(2, 2);
        let model = analytic_gaussian_model(mu, 1.0).unwrap();
        let z = ImageTensor::from_pixels(2, 2, vec![0.3, -0.7, 1.2, 0.05]).unwrap();
        let base = cfg_noise(&model, &z, 10, ConditionId::Class(0), 0.0, &s).unwrap();
        for w in [0.5, 1.0, 3.0, 7.5] {
            let out = cfg_noise(&model, &z, 10, ConditionId::Class(0), w, &s).unwrap();
            for (a, b) in out.pixels.iter().zip(&base.pixels) {
                assert!((a - b).abs() < 1e-6, "w={w}");
            }
        }
    }

    #[test]
    fn cfg_rejects_unconditional() {
        let s = test_schedule();
        let model = analytic_gaussian_model(ImageTensor::zeros(1, 1), 1.0).unwrap();
        let z = ImageTensor::zeros(1, 1);
        assert!(cfg_noise(&model, &z, 1, ConditionId::Unconditional, 1.0, &s).is_err());
    }

    #[test]
    fn ancestral_step_zero_eps() {
        let s = test_schedule();
        let z = image(&[1.0, 0.5]);
        let zero = ImageTensor::zeros(1, 2);
        let out = ancestral_step(&z, &zero, 10, &s, &zero).unwrap();
        let expect = 1.0 / s.alpha(10).sqrt();
        assert!((out.pixels[0] as f64 - expect).abs() < 1e-6);
        assert!((out.pixels[1] as f64 - 0.5 * expect).abs() < 1e-6);
    }

    #[test]
    fn ancestral_step_scalar_hand_case() {
        // alpha_t = 0.81 (beta = 0.19) on a 2-step schedule tuned so
        // abar_2 = 0.5: alpha_1 = 0.5 / 0.81, then t = 2 has abar = 0.5.
        let beta1 = 1.0 - 0.5 / 0.81;
        let s = VarianceSchedule::from_betas(vec![beta1, 0.19]).unwrap();
        assert!((alpha_bar_at(&s, 2).unwrap() - 0.5).abs() < 1e-12);
        let z = image(&[1.0]);
        let eps_hat = image(&[1.0]);
        let zero = image(&[0.0]);
        let out = ancestral_step(&z, &eps_hat, 2, &s, &zero).unwrap();
        // (1 - 0.19 / sqrt(0.5)) / 0.9 evaluated independently:
        let expected = (1.0 - 0.19 / 0.5f64.sqrt()) / 0.9;
        assert!((expected - 0.8125549146101243).abs() < 1e-12);
        assert!((out.pixels[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn ancestral_single_step_inverts_forward() {
        // One-step schedule: applying the reverse step with the true noise
        // recovers the source exactly.
        let s = VarianceSchedule::from_betas(vec![0.5]).unwrap();
        let z = image(&[0.3, 0.9, 0.04]);
        let eps = image(&[1.3, -0.4, 0.7]);
        let z1 = forward_noise(&z, 1, &eps, &s).unwrap();
        let zero = ImageTensor::zeros(1, 3);
        let back = ancestral_step(&z1, &eps, 1, &s, &zero).unwrap();
        for (a, b) in back.pixels.iter().zip(&z.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ancestral_rejects_t_zero() {
        let s = test_schedule();
        let z = ImageTensor::zeros(1, 1);
        assert!(ancestral_step(&z, &z, 0, &s, &z).is_err());
    }

    #[test]
    fn ddim_zero_eps_rescales() {
        let s = test_schedule();
        let z = image(&[0.8, 0.2]);
        let zero = ImageTensor::zeros(1, 2);
        let out = ddim_step(&z, &zero, 20, 5, &s).unwrap();
        let ratio = (alpha_bar_at(&s, 5).unwrap() / alpha_bar_at(&s, 20).unwrap()).sqrt();
        for (o, zv) in out.pixels.iter().zip(&z.pixels) {
            assert!((*o as f64 - ratio * *zv as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_endpoint_returns_x0() {
        let s = test_schedule();
        let z = image(&[0.4, 0.6, -0.2]);
        let eps = image(&[0.9, -1.1, 0.3]);
        let zt = forward_noise(&z, 30, &eps, &s).unwrap();
        // t_prev = 0 has abar = 1, so the output is x0_hat; with the true
        // noise that is the source.
        let out = ddim_step(&zt, &eps, 30, 0, &s).unwrap();
        for (a, b) in out.pixels.iter().zip(&z.pixels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing() {
        let s = test_schedule();
        let z = ImageTensor::zeros(1, 1);
        assert!(ddim_step(&z, &z, 5, 5, &s).is_err());
        assert!(ddim_step(&z, &z, 5, 6, &s).is_err());
    }

    #[test]
    fn ddim_plan_contains_endpoints() {
        for (t0, n) in [(200usize, 20usize), (7, 20), (1, 20), (153, 10)] {
            let plan = ddim_plan(t0, n);
            assert_eq!(*plan.first().unwrap(), t0);
            assert_eq!(*plan.last().unwrap(), 0);
            for w in plan.windows(2) {
                assert!(w[0] > w[1], "plan must strictly decrease: {plan:?}");
            }
        }
    }

    #[test]
    fn samplers_recover_source_with_exact_inversion() {
        // Analytic model with sigma2 -> 0 collapses to the exact inversion
        // of the forward map; both samplers must then recover the source.
        let s = test_schedule();
        let z = ImageTensor::from_pixels(2, 2, vec![0.15, 0.85, 0.4, 0.66]).unwrap();
        let model = analytic_gaussian_model(z.clone(), 1e-12).unwrap();
        let mut r = rng::stream(5, "exact-inversion", &[]);
        for t0 in [1usize, 7, 25, 50] {
            let eps = z.from_f64(&rng::normal_vec(&mut r, 4));
            let zt = forward_noise(&z, t0, &eps, &s).unwrap();

            // Ancestral with eps' = 0 at every step.
            let zero = ImageTensor::zeros(2, 2);
            let mut cur = zt.clone();
            for t in (1..=t0).rev() {
                let eps_hat = model.predict(&cur, t, ConditionId::Class(0), &s).unwrap();
                cur = ancestral_step(&cur, &eps_hat, t, &s, &zero).unwrap();
            }
            for (a, b) in cur.pixels.iter().zip(&z.pixels) {
                assert!((a - b).abs() < 1e-6, "ancestral t0={t0}");
            }

            // Strided DDIM.
            let mut cur = zt.clone();
            for pair in ddim_plan(t0, 8).windows(2) {
                let eps_hat = model
                    .predict(&cur, pair[0], ConditionId::Class(0), &s)
                    .unwrap();
                cur = ddim_step(&cur, &eps_hat, pair[0], pair[1], &s).unwrap();
            }
            for (a, b) in cur.pixels.iter().zip(&z.pixels) {
                assert!((a - b).abs() < 1e-6, "ddim t0={t0}");
            }
        }
    }

    #[test]
    fn generate_identity_at_lambda_one() {
        let s = test_schedule();
        let net = NoiseNet::init(NoiseNetSpec::new(2, 2, 3), 1);
        let model = NoiseModel::Net(net);
        let z = ImageTensor::from_pixels(2, 2, vec![0.1, 0.9, 0.5, 0.31]).unwrap();
        for sampler in [Sampler::Ancestral, Sampler::Ddim] {
            let cfg = GenerationConfig::new(
                3.0,
                GuidanceLevel::new(1.0).unwrap(),
                sampler,
                99,
            );
            let out = generate_guided(&model, &z, ConditionId::Class(0), &cfg, &s).unwrap();
            assert_eq!(out.pixels, z.pixels);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let s = test_schedule();
        let net = NoiseNet::init(NoiseNetSpec::new(2, 2, 3), 2);
        let model = NoiseModel::Net(net);
        let z = ImageTensor::from_pixels(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let cfg = GenerationConfig::new(3.0, GuidanceLevel::new(0.3).unwrap(), Sampler::Ancestral, 7);
        let a = generate_guided(&model, &z, ConditionId::Class(1), &cfg, &s).unwrap();
        let b = generate_guided(&model, &z, ConditionId::Class(1), &cfg, &s).unwrap();
        assert_eq!(a.pixels, b.pixels);
        // A different seed must change the output.
        let cfg2 = GenerationConfig { seed: 8, ..cfg };
        let c = generate_guided(&model, &z, ConditionId::Class(1), &cfg2, &s).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn generate_output_is_clamped() {
        let s = test_schedule();
        let net = NoiseNet::init(NoiseNetSpec::new(2, 2, 3), 3);
        let model = NoiseModel::Net(net);
        let z = ImageTensor::from_pixels(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let cfg = GenerationConfig::new(3.0, GuidanceLevel::new(0.0).unwrap(), Sampler::Ddim, 7);
        let out = generate_guided(&model, &z, ConditionId::Class(2), &cfg, &s).unwrap();
        assert!(out.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn analytic_model_centered_input_gives_zero() {
        let s = test_schedule();
        let mu = ImageTensor::from_pixels(1, 2, vec![0.4, 0.8]).unwrap();
        let model = analytic_gaussian_model(mu.clone(), 2.0).unwrap();
        let t = 20;
        let abar = alpha_bar_at(&s, t).unwrap();
        let z: Vec<f64> = mu.pixels.iter().map(|&m| abar.sqrt() * m as f64).collect();
        let out = model.predict_f64(&z, t, ConditionId::Class(0), &s).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn analytic_model_small_sigma_limit_is_inversion() {
        let s = test_schedule();
        let mu = ImageTensor::from_pixels(1, 1, vec![0.5]).unwrap();
        let model = analytic_gaussian_model(mu, 1e-14).unwrap();
        let t = 10;
        let abar = alpha_bar_at(&s, t).unwrap();
        let z = vec![0.9f64];
        let out = model.predict_f64(&z, t, ConditionId::Class(0), &s).unwrap();
        let expect = (0.9 - abar.sqrt() * 0.5) / (1.0 - abar).sqrt();
        assert!((out[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn analytic_model_matches_monte_carlo_regression() {
        // Fit E[eps | z_t] empirically and compare the linear coefficient
        // with the closed form at abar = 0.5, mu = 0, sigma2 = 1.
        let beta1 = 0.5;
        let s = VarianceSchedule::from_betas(vec![beta1]).unwrap();
        let mu = ImageTensor::zeros(1, 1);
        let model = analytic_gaussian_model(mu, 1.0).unwrap();
        let mut r = rng::stream(21, "mc-regression", &[]);
        let n = 100_000;
        let mut sxy = 0.0f64;
        let mut sxx = 0.0f64;
        let mut sx = 0.0f64;
        let mut sy = 0.0f64;
        for _ in 0..n {
            let z0 = rng::normal(&mut r);
            let eps = rng::normal(&mut r);
            let zt = 0.5f64.sqrt() * z0 + 0.5f64.sqrt() * eps;
            sx += zt;
            sy += eps;
            sxy += zt * eps;
            sxx += zt * zt;
        }
        let nf = n as f64;
        let slope = (sxy - sx * sy / nf) / (sxx - sx * sx / nf);
        // Closed-form slope: model prediction is linear in z_t.
        let pred1 = model.predict_f64(&[1.0], 1, ConditionId::Class(0), &s).unwrap()[0];
        let pred0 = model.predict_f64(&[0.0], 1, ConditionId::Class(0), &s).unwrap()[0];
        let formula_slope = pred1 - pred0;
        assert!((formula_slope - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(
            (slope - formula_slope).abs() < 0.02,
            "mc={slope} formula={formula_slope}"
        );
    }

    fn constant_dataset(v: f32, n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                image: ImageTensor::from_pixels(2, 2, vec![v; 4]).unwrap(),
                label: 0,
                origin: Origin::Real,
                lambda: 1.0,
                sample_id: SampleId(i as u64),
            })
            .collect()
    }

    #[test]
    fn training_is_bit_reproducible() {
        let s = make_linear_schedule(10, 1e-3, 0.05).unwrap();
        let data = constant_dataset(0.5, 4);
        let cfg = NoiseTrainConfig {
            epochs: 2,
            batch_size: 2,
            hidden: 16,
            seed: 77,
            ..Default::default()
        };
        let (a, _) = train_noise_model(&data, 1, &s, &cfg).unwrap();
        let (b, _) = train_noise_model(&data, 1, &s, &cfg).unwrap();
        match (a, b) {
            (NoiseModel::Net(na), NoiseModel::Net(nb)) => assert_eq!(na.params, nb.params),
            _ => panic!("expected trained nets"),
        }
    }

    #[test]
    fn zero_dropout_never_hits_unconditional() {
        let s = make_linear_schedule(10, 1e-3, 0.05).unwrap();
        let data = constant_dataset(0.5, 8);
        let cfg = NoiseTrainConfig {
            epochs: 3,
            batch_size: 4,
            hidden: 16,
            cond_dropout_p: 0.0,
            seed: 5,
            ..Default::default()
        };
        let (_, log) = train_noise_model(&data, 1, &s, &cfg).unwrap();
        assert_eq!(log.uncond_steps, 0);
        assert_eq!(log.cond_steps, 24);
    }

    #[test]
    fn overfit_single_image_predicts_noise_at_small_t() {
        // Overfit oracle: one constant image, model must learn the linear
        // inversion; check the noise-prediction MSE at small t.
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let data = constant_dataset(0.5, 1);
        let cfg = NoiseTrainConfig {
            epochs: 40_000,
            batch_size: 1,
            hidden: 64,
            learn_rate: 3e-3,
            cond_dropout_p: 0.1,
            seed: 11,
            ..Default::default()
        };
        let (model, log) = train_noise_model(&data, 1, &s, &cfg).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &0.1);
        let mut r = rng::stream(12, "overfit-eval", &[]);
        for t in [1usize, 2, 3] {
            let mut mse = 0.0f64;
            let trials = 200;
            for _ in 0..trials {
                let eps = rng::normal_vec(&mut r, 4);
                let abar = alpha_bar_at(&s, t).unwrap();
                let z: Vec<f64> = eps
                    .iter()
                    .map(|&e| abar.sqrt() * 0.5 + (1.0 - abar).sqrt() * e)
                    .collect();
                let pred = model.predict_f64(&z, t, ConditionId::Class(0), &s).unwrap();
                mse += pred
                    .iter()
                    .zip(&eps)
                    .map(|(&p, &e)| (p - e) * (p - e))
                    .sum::<f64>()
                    / 4.0;
            }
            mse /= trials as f64;
            assert!(mse < 0.05, "t={t} mse={mse}");
        }
    }

    #[test]
    fn rejects_empty_training_set() {
        let s = test_schedule();
        let cfg = NoiseTrainConfig::default();
        assert!(train_noise_model(&[], 1, &s, &cfg).is_err());
    }
}
