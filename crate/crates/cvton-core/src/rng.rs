//! Deterministic random number helpers.
//!
//! Everything stochastic in this crate (weight init, data synthesis, epoch
//! shuffles, sampling for gradient checks) flows through a ChaCha8 stream
//! seeded from explicit integers. ChaCha8's output for a given seed is a
//! fixed bitstream, so runs are reproducible across platforms and releases —
//! a property the determinism tests pin down by snapshotting values.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Root RNG for a given seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream derived from (seed, salt) — used so that e.g. the
/// shuffle order of epoch 3 does not depend on how much randomness epoch 2
/// consumed. The mixer is splitmix64 over the combined words.
pub fn rng_stream(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard-normal array via Box–Muller over the uniform stream.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        out.push(r * t.cos());
        if out.len() < n {
            out.push(r * t.sin());
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), out).expect("shape/product mismatch")
}

/// Uniform array over `[lo, hi)`.
pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// Fisher–Yates shuffle of `0..n` driven by the given stream.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
