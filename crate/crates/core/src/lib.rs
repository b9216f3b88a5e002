//! Post-selection inference toolkit.
//!
//! Adjusts hypothesis tests and confidence intervals for model selection
//! performed by the Lasso (plain and randomized), cross-validation, AIC
//! minimization over a model menu, and forward stepwise. Selection events
//! are represented as affine constraints on a data vector; inference goes
//! through truncated-Gaussian pivots (closed form in 1-D, hit-and-run
//! Monte Carlo otherwise) or through projected Langevin sampling of the
//! constrained selective densities of randomized procedures.

pub mod aic_fs;
pub mod covariance;
pub mod cv;
pub mod dataset;
pub mod error;
pub mod event;
pub mod harness;
pub mod lasso;
pub mod law;
pub mod linalg;
pub mod loco;
pub mod pivot;
pub mod rng;
pub mod sampler;
pub mod stats;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use event::AffineEvent;
pub use law::{JointGaussianLaw, TargetDecomposition};
pub use rng::RngHub;
