//! Conditional latent-factor asset-pricing models with firm characteristics.
//!
//! The crate estimates factor loadings that are linear in observed
//! characteristics, splits pricing errors into an *inside* alpha (spanned by
//! characteristics, orthogonal to the loadings) and an *outside* alpha
//! (orthogonal to the characteristics), debiases the spectral loading
//! estimator, and provides the variance estimators and max-type tests needed
//! for inference. A Monte Carlo lab reproduces coverage and power studies.
//!
//! The usual entry point is [`pipeline::estimate`], which runs the whole
//! estimation on a [`panel::Panel`]; [`inference`] then turns an
//! [`pipeline::Estimation`] into variances, test statistics and bands.

pub mod error;
pub mod factor;
pub mod inference;
pub mod linalg;
pub mod outside;
pub mod panel;
pub mod parallel;
pub mod pipeline;
pub mod simlab;
pub mod stats;

pub use error::{Error, Result};
pub use factor::{ModelFit, TransformedReturns};
pub use inference::{TestReport, VarianceEstimates};
pub use outside::{OmegaSpec, OrthoBasis, OutsideAlphaFit, ThresholdRule};
pub use panel::{MissingPolicy, Panel, PanelSchema, TieRule};
pub use pipeline::{estimate, Estimation, EstimationConfig};
