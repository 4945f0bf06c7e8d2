//! Minimal neural-network engine and the segmentation network built on it.

pub mod checkpoint;
pub mod graph;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use network::{
    count_params, forward, forward_mixed_precision, forward_train, ModelParams, NetworkConfig,
    TrainForward,
};
pub use optim::AdamW;
pub use tensor::{Scalar, Tensor};
