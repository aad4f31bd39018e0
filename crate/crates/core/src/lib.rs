//! Clean-instance selection for noisy binary relation data.
//!
//! The pipeline starts from a small trusted seed set, trains a binary
//! classifier on it, and scores every instance of a large automatically
//! labelled (dirty) set by how strongly the clean instances support it,
//! where support is an influence-function estimate of the change in the
//! instance's loss if a clean training instance were removed. Instances
//! that pass the score threshold in enough iterations are promoted into
//! the clean set, and the loop repeats with the enlarged seed.
//!
//! Modules:
//! - [`dataset`]: instance representation, JSONL I/O, synthetic data and
//!   noise injection.
//! - [`model`]: the binary softmax classifier, its training (plain and
//!   teacher-student regularized) and derivative primitives.
//! - [`influence`]: inverse Hessian-vector products (exact CG and LiSSA)
//!   and support scores.
//! - [`selection`]: thresholding, capping, majority voting, set updates.
//! - [`bootstrap`]: the iterative sample / fit / score / select loop.
//! - [`oracle`]: leave-one-out and relabel retraining ground truth for
//!   validating influence estimates.
//! - [`metrics`], [`config`], [`experiment`]: evaluation, configuration
//!   and experiment drivers behind the CLI.

pub mod bootstrap;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod influence;
mod linalg;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod selection;

pub use error::{Error, Result};
