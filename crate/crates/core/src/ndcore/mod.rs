//! Small dense numeric kernel: row-major matrices, a define-by-run
//! reverse-mode tape over a closed set of primitives, a flat parameter store
//! and the Adam optimizer.

mod adam;
mod matrix;
mod params;
mod tape;

pub use adam::Adam;
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, Gradients, NodeId, Tape};
