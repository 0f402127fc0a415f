//! Per-node predictive uncertainty for graph convolutional networks.
//!
//! The library trains a GCN on a node-labeled graph, approximates
//! leave-one-out retraining through damped inverse-Hessian-vector products,
//! and turns the resulting parameter perturbations into per-node confidence
//! intervals. On top of that sit two consumers: an active-learning loop that
//! acquires the widest intervals, and a semi-supervised trainer that
//! reweights each labeled node's loss by its measured uncertainty.
//!
//! Modules build bottom-up: [`sparse`] and [`graph`] hold the data and the
//! renormalized propagation matrix, [`model`] the network and trainer,
//! [`derivatives`] first and second derivatives of the training loss,
//! [`influence`] the inverse-curvature solves, [`jackknife`] the interval
//! construction, [`applications`] the two consumers, and [`oracle`] the slow
//! reference routines everything is validated against.

pub mod applications;
pub mod derivatives;
pub mod error;
pub mod graph;
pub mod influence;
pub mod jackknife;
pub mod model;
pub mod oracle;
pub mod seeding;
pub mod sparse;

#[cfg(test)]
pub(crate) mod testref;

pub use error::{Error, Result};
