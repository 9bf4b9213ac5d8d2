//! The interpretable sequence model, its plain variant, training and
//! transfer learning.

pub mod network;
pub mod store;
pub mod train;

pub use network::{Architecture, ForwardTrace, ModelConfig, Network, NetworkHeader};
pub use store::{load_model, load_network, save_model, Manifest};
pub use train::{
    evaluate, fine_tune, predict, train, train_base_models, train_fresh, train_scratch, History, Prediction,
    TrainedModel, TrainingKind,
};
