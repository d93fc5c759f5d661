//! Graph regularized neural point process.

pub mod eventstore;
pub mod hawkes;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use eventstore::{ConnectionMatrix, DataError, Dataset, Event, EventSequence};
pub use hawkes::{HawkesError, MhpParams, SynthInfectivity};
pub use inference::{InferenceError, Metrics, Prediction, PredictionConfig};
pub use model::{Ablation, Checkpoint, GrppModel, ModelConfig, ModelError};
pub use numerics::{NumericsError, ParamVector, Tape};
pub use training::{KlNormalization, TrainConfig, TrainError, TrainReport};
