//! Raw `(A, phi)` estimators operating on a detection matrix and the LO
//! intensity it was collected with.

mod bayes;
mod mlp;

pub use bayes::{bayes_estimate, BayesEstimator, BayesGrid, Posterior};
pub use mlp::{leaky_relu, network_input, Mlp, NnEstimator, LEAKY_SLOPE, DEFAULT_LAYER_SIZES};
pub(crate) use mlp::dot;

use crate::receiver::DetectionMatrix;

/// Lower bound applied to intensity estimates.
pub const MIN_INTENSITY: f64 = 0.05;

/// Raw estimate of the input intensity and residual phase offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEstimate {
    pub intensity: f64,
    pub phase: f64,
    /// The input carried no usable information (e.g. an empty matrix).
    pub degenerate: bool,
}

/// An estimator of `(A, phi)` from one estimation period.
pub trait Estimator: Send + Sync {
    fn estimate(&self, matrix: &DetectionMatrix, lo_intensity: f64) -> RawEstimate;

    /// Short label used in result tables.
    fn label(&self) -> &'static str;
}
