//! Implicit discourse relation classification by explicitating connectives.
//!
//! A BiLSTM encoder reads `[Arg1 ; Arg2]`, an attentional LSTM decoder
//! regenerates the pair with a connective between the arguments, and a
//! memory-augmented classifier predicts the relation from the fused
//! encoder and decoder summaries.

pub mod container;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod memory;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;

/// Random number generator used for every seeded operation.
pub type ModelRng = rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const MEMORY: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTH: u64 = 6;
}

pub fn rng_stream(seed: u64, stream: u64) -> ModelRng {
    use rand::SeedableRng;
    let mut rng = ModelRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub use error::{Error, ErrorClass, Result};
pub use tape::{Gradients, Tape, Var};
pub use model::{Model, Prediction};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainOutcome};
