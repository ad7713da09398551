//! Seed derivation and counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! `(key, stream)` pair, so a value depends only on its address and never on
//! how many draws other components made before it.
//!
//! Child seeds are derived with [`derive_seed`]:
//!
//! ```text
//! bytes = le64(master) ‖ 0xFF ‖ stage ‖ 0xFF ‖ model ‖ 0xFF ‖ attack ‖ 0xFF ‖ le64(index)
//! seed  = splitmix64_finalize(fnv1a64(bytes))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const SEPARATOR: u8 = 0xFF;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 output finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed from a master seed and a cell address.
pub fn derive_seed(master: u64, stage: &str, model: &str, attack: &str, index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    for part in [stage, model, attack] {
        h = fnv1a(h, &[SEPARATOR]);
        h = fnv1a(h, part.as_bytes());
    }
    h = fnv1a(h, &[SEPARATOR]);
    h = fnv1a(h, &index.to_le_bytes());
    mix64(h)
}

/// A ChaCha8 generator positioned at the start of stream `stream` under `key`.
pub fn stream_rng(key: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
