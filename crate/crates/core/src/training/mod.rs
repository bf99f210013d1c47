pub mod adam;
pub mod config;
pub mod loss;
pub mod trainer;

pub use adam::Adam;
pub use config::{DecoderInit, TrainConfig};
pub use trainer::{fit, train_model, EpochRecord, TrainOutcome};
