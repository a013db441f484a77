//! Dense and convolution primitives shared by the noise estimator and the
//! classifier.
//!
//! Parameters are stored as flat f32 vectors (the checkpoint format), all
//! arithmetic runs in f64. Keeping the math in f64 lets analytic gradients
//! agree with central finite differences to well below 1e-4 relative.

use rand_chacha::ChaCha8Rng;

use crate::rng;

/// out = W x + b, with W row-major (out_dim, in_dim).
pub fn linear_forward(
    w: &[f32],
    b: &[f32],
    x: &[f64],
    out: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    debug_assert_eq!(w.len(), in_dim * out_dim);
    debug_assert_eq!(b.len(), out_dim);
    debug_assert_eq!(x.len(), in_dim);
    debug_assert_eq!(out.len(), out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o] as f64;
        for i in 0..in_dim {
            acc += row[i] as f64 * x[i];
        }
        out[o] = acc;
    }
}

/// Backward pass of `linear_forward`. `gw`/`gb` accumulate; `gx` is overwritten.
pub fn linear_backward(
    w: &[f32],
    x: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    for o in 0..out_dim {
        let g = gout[o];
        gb[o] += g;
        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * x[i];
        }
    }
    if let Some(gx) = gx {
        for v in gx.iter_mut() {
            *v = 0.0;
        }
        for o in 0..out_dim {
            let g = gout[o];
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gx[i] += g * row[i] as f64;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation x * sigmoid(x), applied in place.
pub fn silu(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v *= sigmoid(*v);
    }
}

/// Gradient of SiLU given the pre-activation values.
pub fn silu_backward(pre: &[f64], gout: &[f64], gin: &mut [f64]) {
    for i in 0..pre.len() {
        let s = sigmoid(pre[i]);
        gin[i] = gout[i] * (s * (1.0 + pre[i] * (1.0 - s)));
    }
}

/// 3x3 same-padding convolution, single input channel.
/// w layout: (channels, 3, 3); out layout: (channels, h, w).
pub fn conv3x3_forward(
    w: &[f32],
    b: &[f32],
    input: &[f64],
    out: &mut [f64],
    h: usize,
    wd: usize,
    channels: usize,
) {
    debug_assert_eq!(w.len(), channels * 9);
    debug_assert_eq!(out.len(), channels * h * wd);
    for c in 0..channels {
        let kernel = &w[c * 9..c * 9 + 9];
        let plane = &mut out[c * h * wd..(c + 1) * h * wd];
        for y in 0..h {
            for x in 0..wd {
                let mut acc = b[c] as f64;
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        acc += kernel[dy * 3 + dx] as f64
                            * input[sy as usize * wd + sx as usize];
                    }
                }
                plane[y * wd + x] = acc;
            }
        }
    }
}

/// Backward pass of `conv3x3_forward`. `gw`/`gb` accumulate.
pub fn conv3x3_backward(
    w: &[f32],
    input: &[f64],
    gout: &[f64],
    gin: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
    h: usize,
    wd: usize,
    channels: usize,
) {
    if let Some(gin) = &gin {
        debug_assert_eq!(gin.len(), h * wd);
    }
    let mut gin = gin;
    if let Some(gin) = gin.as_deref_mut() {
        for v in gin.iter_mut() {
            *v = 0.0;
        }
    }
    for c in 0..channels {
        let kernel = &w[c * 9..c * 9 + 9];
        let gkernel = &mut gw[c * 9..c * 9 + 9];
        let gplane = &gout[c * h * wd..(c + 1) * h * wd];
        for y in 0..h {
            for x in 0..wd {
                let g = gplane[y * wd + x];
                gb[c] += g;
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let idx = sy as usize * wd + sx as usize;
                        gkernel[dy * 3 + dx] += g * input[idx];
                        if let Some(gin) = gin.as_deref_mut() {
                            gin[idx] += g * kernel[dy * 3 + dx] as f64;
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Cross-entropy loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -(probs[target].max(1e-300)).ln();
    let mut grad = probs;
    grad[target] -= 1.0;
    (loss, grad)
}

/// He-style init scaled for SiLU layers: N(0, 2 / fan_in).
pub fn init_dense(rng: &mut ChaCha8Rng, params: &mut [f32], in_dim: usize, out_dim: usize) {
    let std = (2.0 / in_dim as f64).sqrt();
    debug_assert_eq!(params.len(), in_dim * out_dim);
    for p in params.iter_mut() {
        *p = (rng::normal(rng) * std) as f32;
    }
}

/// Adam optimizer over a flat f32 parameter vector; moments kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f64]) {
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1c;
            let vhat = self.v[i] / b2c;
            let new = params[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = new as f32;
        }
    }
}

/// Plain SGD step: theta -= lr * g, in f64 then narrowed.
pub fn sgd_update(params: &mut [f32], grads: &[f64], lr: f64) {
    for i in 0..params.len() {
        params[i] = (params[i] as f64 - lr * grads[i]) as f32;
    }
}

/// Cosine decay from `lr0` to a 10% floor over `total` units of progress.
pub fn cosine_lr(lr0: f64, progress: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let floor = 0.1;
    let frac = (progress.min(total)) as f64 / total as f64;
    lr0 * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_matches_hand_computation() {
        let w = [1.0f32, 2.0, 3.0, 4.0]; // 2x2
        let b = [0.5f32, -0.5];
        let x = [1.0f64, -1.0];
        let mut out = [0.0f64; 2];
        linear_forward(&w, &b, &x, &mut out, 2, 2);
        assert_eq!(out, [1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -50.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng::stream(11, "nn-gradcheck", &[]);
        let in_dim = 5;
        let out_dim = 3;
        let mut w = vec![0.0f32; in_dim * out_dim];
        init_dense(&mut r, &mut w, in_dim, out_dim);
        let b: Vec<f32> = (0..out_dim).map(|i| 0.1 * i as f32).collect();
        let x: Vec<f64> = (0..in_dim).map(|_| rng::normal(&mut r)).collect();
        let target = 1usize;

        let loss_of = |w: &[f32]| -> f64 {
            let mut out = vec![0.0f64; out_dim];
            linear_forward(w, &b, &x, &mut out, in_dim, out_dim);
            silu(&mut out);
            cross_entropy(&out, target).0
        };

        // Analytic gradient.
        let mut pre = vec![0.0f64; out_dim];
        linear_forward(&w, &b, &x, &mut pre, in_dim, out_dim);
        let mut act = pre.clone();
        silu(&mut act);
        let (_, gl) = cross_entropy(&act, target);
        let mut gpre = vec![0.0f64; out_dim];
        silu_backward(&pre, &gl, &mut gpre);
        let mut gw = vec![0.0f64; in_dim * out_dim];
        let mut gb = vec![0.0f64; out_dim];
        linear_backward(&w, &x, &gpre, None, &mut gw, &mut gb, in_dim, out_dim);

        for idx in 0..w.len() {
            let h = 1e-4f64;
            let orig = w[idx];
            let wp = (orig as f64 + h) as f32;
            let wm = (orig as f64 - h) as f32;
            let mut wv = w.clone();
            wv[idx] = wp;
            let lp = loss_of(&wv);
            wv[idx] = wm;
            let lm = loss_of(&wv);
            let fd = (lp - lm) / (wp as f64 - wm as f64);
            let denom = fd.abs().max(gw[idx].abs()).max(1e-8);
            let rel = (fd - gw[idx]).abs() / denom;
            assert!(rel < 1e-4, "idx={idx} analytic={} fd={fd} rel={rel}", gw[idx]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng::stream(13, "conv-gradcheck", &[]);
        let (h, wd, c) = (5usize, 5usize, 2usize);
        let mut w = vec![0.0f32; c * 9];
        init_dense(&mut r, &mut w, 9, c);
        let b = vec![0.05f32; c];
        let input: Vec<f64> = (0..h * wd).map(|_| rng::normal(&mut r)).collect();
        // Scalar objective: sum of SiLU over all output activations.
        let loss_of = |w: &[f32]| -> f64 {
            let mut out = vec![0.0f64; c * h * wd];
            conv3x3_forward(w, &b, &input, &mut out, h, wd, c);
            silu(&mut out);
            out.iter().sum()
        };
        let mut pre = vec![0.0f64; c * h * wd];
        conv3x3_forward(&w, &b, &input, &mut pre, h, wd, c);
        let gout_act = vec![1.0f64; c * h * wd];
        let mut gpre = vec![0.0f64; c * h * wd];
        silu_backward(&pre, &gout_act, &mut gpre);
        let mut gw = vec![0.0f64; c * 9];
        let mut gb = vec![0.0f64; c];
        conv3x3_backward(&w, &input, &gpre, None, &mut gw, &mut gb, h, wd, c);

        for idx in 0..w.len() {
            let hstep = 1e-4f64;
            let orig = w[idx] as f64;
            let wp = (orig + hstep) as f32;
            let wm = (orig - hstep) as f32;
            let mut wv = w.clone();
            wv[idx] = wp;
            let lp = loss_of(&wv);
            wv[idx] = wm;
            let lm = loss_of(&wv);
            let fd = (lp - lm) / (wp as f64 - wm as f64);
            let denom = fd.abs().max(gw[idx].abs()).max(1e-8);
            let rel = (fd - gw[idx]).abs() / denom;
            assert!(rel < 1e-4, "idx={idx} analytic={} fd={fd} rel={rel}", gw[idx]);
        }
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert!((cosine_lr(0.01, 0, 10) - 0.01).abs() < 1e-15);
        assert!((cosine_lr(0.01, 10, 10) - 0.001).abs() < 1e-12);
        assert!((cosine_lr(0.01, 20, 10) - 0.001).abs() < 1e-12);
    }
}
