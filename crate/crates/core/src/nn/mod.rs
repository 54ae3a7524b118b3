//! Minimal CPU neural-network engine: sequential networks over NCHW `f64`
//! tensors with hand-written backward passes, an Adam optimizer and
//! directory checkpoints.

mod adam;
mod checkpoint;
pub mod kernels;
mod network;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
pub use network::{Layer, Network, NetworkBuilder, Tape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used for all seeded randomness in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ (h >> 31)
}
