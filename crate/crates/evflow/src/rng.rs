//! Seeded, stream-addressed random number generation.
//!
//! All randomness in the crate flows from a single 64-bit experiment seed.
//! Every consumer (a link, a station, a node's movement arbiter, a Monte
//! Carlo replication) draws from its own named ChaCha stream, so adding or
//! removing draws in one subsystem does not perturb any other.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream namespaces. Each (namespace, index) pair owns an independent
/// ChaCha stream under the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Link(usize),
    Station(usize),
    Node(usize),
    MonteCarlo(usize),
    Placement(usize),
    Noise(usize),
}

impl Stream {
    fn id(self) -> u64 {
        let (ns, idx) = match self {
            Stream::Link(i) => (1u64, i),
            Stream::Station(i) => (2, i),
            Stream::Node(i) => (3, i),
            Stream::MonteCarlo(i) => (4, i),
            Stream::Placement(i) => (5, i),
            Stream::Noise(i) => (6, i),
        };
        (ns << 48) | (idx as u64 & 0xffff_ffff_ffff)
    }
}

/// RNG for one (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Derive a child seed, e.g. one seed per Monte Carlo replication.
pub fn child_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps child seeds well separated
    let mut z = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
