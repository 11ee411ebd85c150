use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one PRNG used everywhere: ChaCha with 8 rounds, seeded through
/// `SeedableRng::seed_from_u64` (a PCG32 stream expands the `u64` into the
/// 32-byte key). Streams are reproducible bit-for-bit across platforms.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
