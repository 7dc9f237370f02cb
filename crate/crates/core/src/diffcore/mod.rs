//! Differentiable numerical primitives.
//!
//! Everything is `f64`. Computations are recorded on a [`Graph`] and
//! differentiated in reverse; parameters are plain [`Tensor`]s updated by
//! [`adam_step`].

mod adam;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{softmax_values, Graph, Var, CE_LOG_FLOOR, MIN_NORM};
pub use tensor::Tensor;

pub(crate) use tensor::{dot, norm};
