//! Rare probabilities of voltage collapse.
//!
//! The crate locates the most probable failure point (instanton) on the
//! saddle-node bifurcation surface of the static power-flow equations and
//! evaluates first- and second-order large-deviation approximations of the
//! collapse probability under Gaussian and Gaussian-mixture load uncertainty,
//! together with Monte Carlo and importance-sampling reference estimators.
//!
//! Pipeline: build a [`model::PowerFlowModel`], pick an uncertainty model from
//! [`distributions`], solve the KKT system with [`instanton`], extract the
//! boundary geometry with [`geometry`], and evaluate probabilities with
//! [`estimators`]. [`cases`] ships the built-in test systems and experiment
//! definitions, and [`sweep`] runs full covariance-scaling sweeps.

pub mod cases;
pub mod distributions;
pub mod estimators;
pub mod geometry;
pub mod instanton;
pub mod model;
pub mod sweep;

pub use distributions::{GaussianMixture, GaussianModel, UncertaintyModel};
pub use estimators::{CollapseClassifier, ProbabilityEstimate};
pub use geometry::BoundaryGeometry;
pub use instanton::{InstantonInit, InstantonSolution};
pub use model::{NetworkDescription, PowerFlowModel};
