//! Few-shot classification with modal-alternating graph propagation.
//!
//! Support samples carry both a visual feature vector and a class-level
//! semantic vector; queries only carry visual features. For every query a
//! small graph over the supports and that query is built, optionally
//! rectified by a learned relation transfer, and used to propagate both
//! modalities, which synthesizes a pseudo-semantic embedding for the query.
//! The propagated modalities are fused with a learned convex weight and
//! classified against class prototypes.
//!
//! Module map:
//! - [`matrix`], [`tape`], [`gradcheck`]: dense arithmetic, reverse-mode
//!   gradients and their finite-difference validation.
//! - [`graph`]: adjacency, normalization and closed-form propagation.
//! - [`relation`]: relation maps, the transfer module and its loss.
//! - [`model`]: parameters and the differentiable forward pass.
//! - [`episodes`]: datasets, sampling, synthetic data and file formats.
//! - [`train`]: optimizer, training loop, evaluation and ablations.
//! - [`oracle`]: scalar reference implementations used for verification.
//! - [`config`], [`report`], [`persist`]: CLI plumbing.

pub mod config;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod persist;
pub mod relation;
pub mod report;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
