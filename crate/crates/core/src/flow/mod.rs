//! Conditional affine-coupling flow over one observation `x_t ∈ R^D` given
//! its temporal context `w_t` (`k x D`, most recent first).
//!
//! Each coupling layer keeps one channel-parity class fixed and applies
//! `active' = active ⊙ exp(s) + t`, with `s, t` produced from the fixed part
//! and the encoded context. Layer `i` transforms channels whose index parity
//! differs from `i`, so consecutive layers alternate. The base distribution
//! is the standard normal.

mod checkpoint;
pub(crate) mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{EncoderKind, FlowConfig, FlowModel, ZChoice};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Something that produces the most likely next observation from a
/// flattened context; the flow does so by inverting `z = 0`.
pub trait Generator {
    fn window(&self) -> usize;
    fn dim(&self) -> usize;
    /// One row per context row of `contexts` (`B x kD`).
    fn generate(&self, contexts: &crate::ndcore::Matrix) -> crate::Result<crate::ndcore::Matrix>;
}
