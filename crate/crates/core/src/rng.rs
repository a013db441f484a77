//! Deterministic random streams.
//!
//! Every random decision in the crate draws from a ChaCha stream keyed by a
//! SHA-256 digest of (global seed, stage label, item ids). Streams for
//! distinct labels or ids are independent, so work can be split across any
//! number of workers without changing results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 64-bit sub-seed from a labeled position in the seed tree.
pub fn derive_seed(seed: u64, label: &str, ids: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Stream keyed by (seed, label, ids); independent of every other label/id pair.
pub fn stream(seed: u64, label: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stream from a bare 64-bit seed (used where a sub-seed was already derived).
pub fn stream_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller; platform-independent.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a buffer with standard normal draws.
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Seeded Fisher-Yates permutation of 0..n.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Seeded sample of k distinct indices from 0..n, in random order.
pub fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} from {n}");
    let mut idx = permutation(rng, n);
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<f64> = {
            let mut r = stream(7, "x", &[1, 2]);
            (0..8).map(|_| normal(&mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = stream(7, "x", &[1, 2]);
            (0..8).map(|_| normal(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn labels_separate_streams() {
        let mut a = stream(7, "x", &[1]);
        let mut b = stream(7, "y", &[1]);
        let va: f64 = a.random();
        let vb: f64 = b.random();
        assert_ne!(va, vb);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = stream(3, "moments", &[]);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sampling_is_distinct_and_in_range() {
        let mut r = stream(9, "sample", &[]);
        let picks = sample_without_replacement(&mut r, 50, 20);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert!(picks.iter().all(|&i| i < 50));
    }
}
