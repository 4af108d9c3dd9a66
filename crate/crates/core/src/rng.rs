//! Named, independent random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream used to pick seed-fill entries for new windows.
pub const SEEDING: &str = "seeding";
/// Substream used to draw poisoned labels.
pub const POISONING: &str = "poisoning";
/// Substream used for synthetic world construction.
pub const WORLD: &str = "world";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream keyed by `(seed, name, key)`. Different names or keys give
/// independent streams; the same triple always gives the same stream.
pub fn substream(seed: u64, name: &str, key: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()).rotate_left(17));
    rng.set_stream(fnv1a(key.as_bytes()));
    rng
}
