//! Encoder-decoder transformer with hand-written backward passes, training
//! loop, checkpoints and sampling-based beam search.

pub mod config;
pub mod decode;
pub mod gradcheck;
pub mod model;
pub mod net;
pub mod ops;
pub mod params;
pub mod predictor;
pub mod train;

pub use config::{ModelConfig, TrainConfig};
pub use decode::{beam_sample, Candidate, DecodeConfig, DecodeError};
pub use model::{AdamState, Checkpoint, CheckpointError, Model};
pub use net::{EncoderInput, LossStats, ModelError, Net};
pub use predictor::{ModelPredictor, Prediction};
pub use train::{make_batches, StepReport, TrainError, TrainExample, TrainLog, Trainer};
