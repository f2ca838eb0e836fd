//! Named deterministic RNG streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream addressed
//! by `(seed, domain, index)`, so that e.g. dataset sample `i` or the
//! batch order of epoch `e` is a pure function of the run seed and is
//! unaffected by whatever else consumed randomness before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each domain gets its own independent stream space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    DatasetSample = 1,
    ModelInit = 2,
    Fc2Init = 3,
    BatchOrder = 4,
    SegmenterInit = 5,
    Augmentation = 6,
}

/// RNG for `(seed, domain, index)`. Indices must stay below 2^56.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << 56));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) ^ index);
    rng
}
