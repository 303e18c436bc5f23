//! Continual learning over a stream of rotated-digit environments, with a
//! replay memory whose samples are used both for rehearsal and for
//! estimating an alpha-quantile of the risk distribution across
//! environments.
//!
//! Module map:
//!
//! - [`nn`]: dense ReLU classifier, exact backprop, plain SGD, checkpoints.
//! - [`data`]: IDX parsing, image rotation, environment schedules.
//! - [`replay`]: reservoir-sampled memory.
//! - [`quantile`]: Φ, Φ⁻¹ and the Gaussian quantile risk with its gradient weights.
//! - [`train`]: the quantile-risk trainer, the ER baseline and evaluation.
//! - [`theory`]: synthetic strongly-convex checks of the memory-size tradeoff.
//! - [`harness`]: experiment specs, sweeps, CSV and plot-data output.

pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quantile;
pub mod replay;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
