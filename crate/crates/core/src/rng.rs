//! Deterministic random streams.
//!
//! Every consumer of randomness derives its generator from a root seed and a
//! stream tag, so adding a new consumer never perturbs existing ones. The
//! algorithm is ChaCha8 (counter based); the tag selects the ChaCha stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as OtocRng;

/// Name of the generator algorithm, recorded alongside run configurations.
pub const RNG_ALGORITHM: &str = "chacha8";

pub(crate) mod stream {
    pub const CLICKS: u64 = 1;
    pub const UNARY_INIT: u64 = 2;
    pub const UNARY_SGD: u64 = 3;
    pub const RELATION_INIT: u64 = 4;
    pub const RELATION_SGD: u64 = 5;
    pub const BANK_INIT: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const ITERATION: u64 = 8;
}

/// Generator for `(seed, stream)`; `sub` further separates e.g. iterations.
pub fn derive(seed: u64, stream: u64, sub: u64) -> OtocRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sub.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}
