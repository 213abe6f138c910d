//! Deterministic randomness. One root seed flows into every component;
//! each consumer derives its own stream from `(root, component name)` or
//! `(root, name, index)`, so adding a component never shifts another's draws
//! and resuming a run never needs saved RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::num::Scalar;

/// FNV-1a over the component name; stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// splitmix64 finalizer; mixes seed material into a well-distributed u64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for a named component under a root seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a(name.as_bytes()))
}

/// Seed for an indexed draw of a named component (per-utterance, per-step...).
pub fn derive_seed_indexed(root: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, name) ^ splitmix64(index.wrapping_add(0x9e37)))
}

/// RNG for a named component.
pub fn component_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

/// RNG for an indexed draw of a named component.
pub fn indexed_rng(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(root, name, index))
}

/// Deterministic pseudo-random vector keyed by an arbitrary string.
/// Entries are uniform in [-1, 1) scaled by 1/sqrt(dim); samples are drawn
/// in f64 so f32 and f64 instantiations agree.
pub fn hashed_vector<T: Scalar>(root: u64, key: &str, dim: usize) -> Vec<T> {
    use rand::Rng;
    let mut rng = component_rng(root, key);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| T::of(rng.gen_range(-1.0..1.0) * scale))
        .collect()
}
