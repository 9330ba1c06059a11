//! Seeded, per-role random streams.
//!
//! Every source of randomness in the pipeline draws from a [`ChaCha8Rng`]
//! derived from a master seed and a role string, so parallel consumers with
//! different roles never share a stream and every run is reproducible from
//! the config seed alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent stream for `role` from the master `seed`.
///
/// The role string is folded into the 256-bit ChaCha key with an FNV-1a
/// accumulator, so distinct roles land on distinct keys.
pub fn derive_rng(seed: u64, role: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[8..16].copy_from_slice(&h.to_le_bytes());
    let mut h2 = h;
    for b in seed.to_le_bytes() {
        h2 ^= u64::from(b);
        h2 = h2.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[16..24].copy_from_slice(&h2.to_le_bytes());
    key[24..32].copy_from_slice(&h2.rotate_left(17).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
