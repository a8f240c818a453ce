//! Dense arrays, reverse-mode differentiation, a finite-difference
//! gradient checker and a reproducible random stream.

mod array;
mod gradcheck;
pub mod nn;
mod real;
mod rng;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use real::Real;
pub use rng::Rng;
pub use tape::{layer_norm, softmax_rows, ConvGeom, Gradients, ResizePlan, Tape, Var};
