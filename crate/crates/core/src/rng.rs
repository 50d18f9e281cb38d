//! Deterministic random-stream derivation.
//!
//! Every random decision in the pipeline draws from a generator keyed by
//! `(seed, step, slot, purpose)`. Because the key — not the number of draws
//! some earlier decision consumed — selects the stream, runs are
//! bit-reproducible, batch workers can execute in any order, and training can
//! resume mid-run without replaying prior steps.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a purpose tag, used to separate streams by name.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 step: advances `state` and returns a well-mixed 64-bit value.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `(seed, step, slot, purpose)`.
pub fn stream(seed: u64, step: u64, slot: u64, purpose: &str) -> ChaCha8Rng {
    let mut state = seed
        ^ fnv1a(purpose)
        ^ step.wrapping_mul(0xd1342543de82ef95)
        ^ slot.wrapping_mul(0xaf251af3b0f025b5);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Mixes an index into a seed, for deriving per-item sub-seeds.
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut state = seed ^ index.wrapping_mul(0x2545f4914f6cdd1d);
    splitmix64(&mut state)
}

/// Content hash of a symbol sequence, used for the stable train/test split.
///
/// Depends only on the sequence itself, so identical texts always land on the
/// same side of the split regardless of corpus size or seed.
pub fn hash_text(indices: &[usize]) -> u64 {
    let mut state = 0x51ce5ab1cd5e1d1b ^ (indices.len() as u64);
    let mut acc = 0u64;
    for &i in indices {
        state ^= (i as u64).wrapping_add(0x9e3779b97f4a7c15);
        acc ^= splitmix64(&mut state);
    }
    let mut fin = acc ^ state;
    splitmix64(&mut fin)
}
