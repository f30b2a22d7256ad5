//! Low-light image enhancement with a vector-quantized prior, intervention
//! based contrastive training, and deformable high-frequency refinement.

// `!(x > 0.0)` also rejects NaN, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cli;
pub mod codebook;
pub mod error;
pub mod fci;
pub mod grad;
pub mod hdrm;
pub mod image;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pci;
pub mod pipeline;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{Model, ModelConfig, Stage};
