//! Seed fan-out.
//!
//! Every random draw in the toolkit comes from a generator seeded by
//! [`derive`], which mixes a master seed with a purpose tag and a path of
//! indices (repetition, fold, source, learner, tree, ...) through SplitMix64.
//! Two call sites with different tags or paths get unrelated streams, and a
//! given stream does not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derives a sub-seed for `tag` at position `path` under `master`.
pub fn derive(master: u64, tag: &str, path: &[u64]) -> u64 {
    let mut state = splitmix(master ^ tag_hash(tag));
    for &p in path {
        state = splitmix(state ^ splitmix(p.wrapping_add(1)));
    }
    state
}

pub fn rng(master: u64, tag: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, path))
}
