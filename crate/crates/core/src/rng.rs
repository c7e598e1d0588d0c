//! Seeded random streams.
//!
//! Every source of randomness in a run gets its own ChaCha stream, keyed by
//! the run seed, the particle count and a purpose label. Distinct purposes
//! never share a stream, and the method is deliberately not part of the key
//! so that different estimators see common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream identifier for `(k, purpose)`.
pub fn stream_id(k: usize, purpose: &str) -> u64 {
    let h = fnv1a(&(k as u64).to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    fnv1a(purpose.as_bytes(), h)
}

/// Independent stream for one purpose of one run.
pub fn stream(seed: u64, k: usize, purpose: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(k, purpose));
    rng
}

/// Uniform draw clamped to `[1e-12, 1 - 1e-12]` so that `log(-log u)` is finite.
pub fn open_uniform<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    u.clamp(1e-12, 1.0 - 1e-12)
}
