//! Speaker-adaptive lip reading at desk scale.
//!
//! A compact lip-reading network (convolutional front-end, attention
//! back-end, projector and prefix-conditioned decoder) together with the
//! parameter-efficient speaker adapters that specialize it: padding prompts
//! and LoRA inside the visual encoder, and input prompt tuning in front of
//! the frozen decoder. The crate also ships a synthetic multi-speaker corpus,
//! the dataset-construction pipeline, training loops and the evaluation
//! harness used to compare adaptation strategies.

pub mod adapters;
pub mod checkpoint;
pub mod datasetkit;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod speakersim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Generator for the independent stream `stream` of `seed`. Distinct
/// `(seed, stream)` pairs never share output, unlike XOR-mixed seeds.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
