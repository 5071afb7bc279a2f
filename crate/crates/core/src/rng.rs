//! Per-replicate random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `replicate`: the master seed keys the cipher and
/// the replicate index selects the stream, so no two replicates overlap and
/// no replicate depends on how work is scheduled.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// A second family of streams for auxiliary draws (lazy cell contents, ...).
pub fn aux_rng(seed: u64, replicate: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(lane + 1));
    rng.set_stream(replicate);
    rng
}
