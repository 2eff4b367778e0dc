//! Synthetic generators with known counterfactual ground truth.
//!
//! Every generator draws each unit's randomness from its own stream, in a
//! fixed order per step that does not depend on the treatments applied.
//! Regenerating a unit under a different regime therefore reuses the same
//! noise (common random numbers), and twins agree exactly up to the switch.

pub mod hemo;
pub mod oracle;
pub mod toy;
pub mod tumor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use hemo::{gen_hemo, HemoData, HemoRegime, HemoSimConfig};
pub use oracle::{exact_gformula, gen_oracle_mdp, OracleMdp, OracleMdpConfig, TabularEstimator};
pub use toy::{LinearGaussianToy, ToyConfig};
pub use tumor::{gen_tumor, TumorData, TumorRegime, TumorSimConfig};

/// SHA-256 of the canonical JSON form of `cfg`, hex encoded.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}
