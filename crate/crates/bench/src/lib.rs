//! Shared inputs for the criterion benches.

use bubblelab::data::{BubbleImage, DatasetSpec};
use bubblelab::models::SimpleCnn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` bubbles, half filled, from a fixed seed.
pub fn bubbles(n: usize) -> Vec<BubbleImage> {
    DatasetSpec {
        bubbles: n,
        swatches: 0,
        ..Default::default()
    }
    .generate(17)
    .expect("default spec is valid")
}

/// An untrained CNN with fixed weights.
pub fn cnn() -> SimpleCnn {
    SimpleCnn::init(&mut ChaCha8Rng::seed_from_u64(5))
}
