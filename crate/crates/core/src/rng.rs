//! Reproducible random number generation.
//!
//! All randomness flows through ChaCha8: seedable, cross-platform stable,
//! and splittable into independent streams. Weight init and data synthesis
//! derive one stream per consumer so insertion order never shifts draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

/// ChaCha8 generator pinned to a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in [lo, hi), sampled at f64 and converted.
pub fn uniform<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(lo..hi)))
}

/// Truncated normal: N(0, std^2) with draws outside 2 std rejected.
pub fn trunc_normal<E: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        loop {
            // Box-Muller on explicit uniforms keeps the draw sequence
            // identical across platforms.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                return E::from_f64(z * std);
            }
        }
    })
}
