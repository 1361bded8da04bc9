//! Deterministic stream derivation: every random decision in a run draws
//! from a ChaCha stream keyed by the base seed plus a purpose tag, so
//! per-instance work is order-independent and reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; the discriminant is part of the key.
#[derive(Copy, Clone, Debug)]
pub enum StreamKind {
    SynthGlobal = 1,
    SynthInstance = 2,
    ProtocolTrain = 3,
    ProtocolTest = 4,
    ModelInit = 5,
    EpochShuffle = 6,
    Dropout = 7,
    PreImpute = 8,
    Audit = 9,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `(base, kind, tags...)` into one 64-bit stream key.
pub fn derive_seed(base: u64, kind: StreamKind, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ (kind as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    for &t in tags {
        acc = splitmix64(acc ^ t);
    }
    acc
}

pub fn stream(base: u64, kind: StreamKind, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, kind, tags))
}
