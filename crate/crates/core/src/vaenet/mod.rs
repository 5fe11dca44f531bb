//! Convolutional variational encoder-decoder for STFT segment separation.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use layers::{Activation, Scalar};
pub use loss::{kld, loss, LossParts};
pub use model::{reparameterize, Architecture, NetworkConfig, ParamEntry};
pub use optim::{adamw_step, AdamW, AdamWState, Plateau, PlateauState};
pub use train::{infer, train, EpochMetrics, InferMode, TrainConfig, TrainOutcome};
