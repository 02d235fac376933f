//! Contextualized local visual embeddings: dense self-supervised pretraining
//! with a momentum teacher, attention-based context and a ranking loss over
//! pixel-matched local features.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod matching;
pub mod objective;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{CloveError, Result};
pub use trainer::{StepMetrics, TrainState};
