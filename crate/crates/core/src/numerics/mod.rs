//! Dense-array compute kernel with reverse-mode differentiation.
//!
//! [`Tape`] records primitives as they run; [`Tape::backward`] sweeps the
//! record in reverse. Arrays are generic over [`Scalar`]: training runs in
//! `f32`, and [`grad_check`] runs in `f64` where central differences are
//! accurate enough to be meaningful.

mod array;
mod gradcheck;
mod tape;

pub use array::{Array, Scalar};
pub use gradcheck::{grad_check, grad_check_with, relative_error, Coordinates, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

#[allow(unused_imports)]
pub(crate) use tape::softmax_data;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("element mask selects no elements")]
    DegenerateMask,
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
