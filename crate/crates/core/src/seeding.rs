//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own stream from the master seed
//! and a fixed label string, so adding or reordering consumers never shifts
//! another consumer's draws. Labels in use:
//!
//! | label                         | consumer                               |
//! |-------------------------------|----------------------------------------|
//! | `synth.family`                | shape-family deformation coefficients  |
//! | `synth.render/<i>`            | speckle of shape `i`                   |
//! | `encoder.init.us`             | US encoder weight initialization       |
//! | `encoder.init.sdf`            | SDF encoder weight initialization      |
//! | `train.shuffle`               | minibatch order                        |
//! | `triplets/<i>`                | triplet sampling for shape `i`         |
//! | `ssm.samples`                 | SSM sample coefficients                |
//! | `localize/<slice>`            | per-slice localization stream          |
//! | `gradcheck`                   | gradient check instance                |
//! | `baseline`                    | random-slice baseline                  |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used everywhere in the crate.
pub type SeededRng = ChaCha8Rng;

/// Stable hash of `(seed, label)` into a child seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, label: &str) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(seed, label))
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used for counter-based per-voxel noise.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw that depends only on `(key, counter)`.
pub fn counter_normal(key: u64, counter: u64) -> f64 {
    let a = splitmix64(key ^ splitmix64(counter.wrapping_mul(2)));
    let b = splitmix64(key ^ splitmix64(counter.wrapping_mul(2).wrapping_add(1)));
    // 53-bit uniforms in (0, 1]
    let u1 = ((a >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
