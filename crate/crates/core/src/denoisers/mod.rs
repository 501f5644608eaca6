//! Noise-prediction models: closed-form denoisers for Gaussian and
//! Gaussian-mixture data (verification oracles) and a small trainable
//! conditional convolutional network.

pub mod analytic;
pub mod checkpoint;
pub mod condnet;

pub use analytic::{
    analytic_gaussian_eps, analytic_mixture_eps, AnalyticGaussianModel, AnalyticMixtureModel,
    MixtureComponent,
};
pub use condnet::{CondNetConfig, CondNetLite};

use crate::error::Result;
use crate::numerics::Grid;

/// Predicts the noise component of a noisy sample.
///
/// `t` may be fractional; integer values address the discrete schedule
/// exactly. `label` is the conditioning class; `None` selects the
/// unconditional branch. Output shape equals input shape and the prediction
/// is deterministic for fixed inputs.
pub trait EpsilonModel: Send + Sync {
    fn predict(&self, x_t: &Grid, t: f64, label: Option<usize>) -> Result<Grid>;
}
