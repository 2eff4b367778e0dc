//! Labeled counter-based seed derivation.
//!
//! Every random stream in the crate is seeded from a master seed plus a
//! label and counters, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for stream `label` at counters `(a, b)` under `master`.
pub fn derive(master: u64, label: &str, a: u64, b: u64) -> u64 {
    let mut z = splitmix64(master ^ label_hash(label));
    z = splitmix64(z ^ a);
    splitmix64(z ^ b.rotate_left(32))
}

pub fn rng(master: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label, a, b))
}
