//! Deterministic random streams.
//!
//! Every stochastic draw in the pipeline comes from a ChaCha8 stream seeded
//! either directly or through [`derive_seed`], which folds a root seed, a
//! purpose tag, and an index into a child seed. Deriving per-step and
//! per-pair seeds (instead of consuming one long stream) is what makes
//! checkpoint resume reproduce the exact trajectory of an uninterrupted run.

#[allow(unused_imports)]
use num_traits::Float;
use rand_core::{RngCore, SeedableRng};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Child seed for (`root`, `tag`, `index`): FNV-1a over the tag, then a
/// splitmix64 finalizer. Stable across platforms and releases of this crate.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    splitmix64(root ^ h.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform integer in `[0, n)`; `n` must be nonzero.
pub fn gen_index(rng: &mut Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// Uniform float in `[0, 1)` with 24 bits of entropy.
pub fn gen_unit_f32(rng: &mut Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

pub fn gen_unit_f64(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform float in `[lo, hi)`.
pub fn gen_range_f32(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * gen_unit_f32(rng)
}

pub fn gen_range_f64(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * gen_unit_f64(rng)
}

/// Standard normal via Box-Muller.
pub fn gen_normal_f64(rng: &mut Rng) -> f64 {
    let u1 = gen_unit_f64(rng).max(1e-300);
    let u2 = gen_unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
}
