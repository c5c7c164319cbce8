//! Unsupervised anomaly detection and imputation for multivariate time series
//! built around a conditional affine-coupling normalizing flow.
//!
//! The flow is trained by exact negative log-likelihood on windowed data,
//! low-likelihood sections are flagged against a threshold derived from known
//! clean points, and flagged sections are regenerated autoregressively from the
//! center of the base distribution. The loop repeats until the flag set settles.
//!
//! Module map:
//!
//! - [`ndcore`]: dense matrices, a reverse-mode tape, flat parameter storage, Adam.
//! - [`series`]: multivariate series, CSV I/O, normalization, windows, splits, synthetic data.
//! - [`flow`]: context encoders, coupling layers, the conditional flow and checkpoints.
//! - [`train`]: NLL training with early stopping.
//! - [`detect`]: scoring, thresholding and flagging.
//! - [`impute`]: flow imputation and the interpolation / skip / raw baselines.
//! - [`metrics`]: AUC-ROC, VUS-ROC, F1 at the equal-error point, reconstruction error.
//! - [`select`]: CMA-ES and candidate ranking objectives.
//! - [`pipeline`]: the iterative detect/impute loop, baselines, downstream evaluation, run directories.
//!
//! With the default `parallel` feature, batch gradients, scoring and candidate
//! evaluation fan out over rayon. Work is always split into fixed-size chunks
//! and reduced in order, so results are bit-identical with the feature off.

pub mod detect;
pub mod error;
pub mod flow;
pub mod impute;
pub mod metrics;
pub mod ndcore;
pub mod par;
pub mod pipeline;
pub mod select;
pub mod series;
pub mod train;

pub use error::{Error, Result};
pub use par::Exec;
