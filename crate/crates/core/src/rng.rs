//! Seeded random streams.
//!
//! Every source of randomness in a run is a ChaCha stream keyed by the master
//! seed plus a purpose tag and a tuple of coordinates (node, round, epoch...).
//! Streams never depend on the order in which they are requested, so serial and
//! parallel execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Graph = 1,
    Subset = 2,
    Allocation = 3,
    Validation = 4,
    Corruption = 5,
    Init = 6,
    Training = 7,
    Centralized = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for `(seed, stream, coords...)`.
pub fn derive(seed: u64, stream: Stream, coords: &[u64]) -> SimRng {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA5A5_A5A5)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
