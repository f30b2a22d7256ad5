//! Configuration, data, checkpoints, and the training loop.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod train;

pub use checkpoint::{Checkpoint, Container};
pub use config::Config;
pub use data::PairedDataset;
pub use train::{enhance_image, model_from_checkpoint, reconstruct_image, StepLog, TrainData, Trainer};
