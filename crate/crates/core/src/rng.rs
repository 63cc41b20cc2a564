//! Seed derivation.
//!
//! Every random stream in the workbench is a [`ChaCha8Rng`] seeded from a
//! root seed and a fixed stream tag. The derived seed is
//! `splitmix64(root ^ fnv1a64(tag))`, which keeps streams with different
//! tags independent while staying stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const TAG_INIT: &str = "init";
pub const TAG_TRAIN: &str = "train";
pub const TAG_PROBE: &str = "probe";
pub const TAG_TEST: &str = "test";
pub const TAG_PATTERN: &str = "pattern";
pub const TAG_SAMPLING: &str = "sampling";
pub const TAG_GRAD_NOISE: &str = "noise/gradient";
pub const TAG_NORM_NOISE: &str = "noise/norm";
pub const TAG_CLIP_INIT: &str = "clip-init";

fn fnv1a64(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a64(tag))
}

pub fn stream(root: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tag))
}
