//! Seed derivation for independent random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! master seed, so changing how one stage draws numbers never perturbs another
//! stage. Paired ablation runs rely on this: two modes with the same seed see
//! the same corpus and the same initial parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Corpus = 1,
    Init = 2,
    Anchors = 3,
    Batches = 4,
    Shuffle = 5,
    TaskSwitch = 6,
}

/// An RNG for `stream`, further keyed by `epoch` (use 0 for one-shot stages).
pub fn stream_rng(seed: u64, stream: Stream, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(epoch)));
    rng.set_stream(stream as u64);
    rng
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
