//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Ops are recorded on a [`Tape`] as they run; [`Tape::backward`] replays the
//! recorded rules in reverse. Everything is generic over [`Float`] so that the
//! same code trains in `f32` and is checked against finite differences in `f64`.

mod conv;
mod float;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use conv::{bilinear_sample, col2im, im2col, ConvGeometry};
pub use float::Float;
pub use optim::{Adam, AdamConfig};
pub use params::{Ctx, ParamBuilder, ParamId, ParamKind, ParamStore};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
