//! Structure-prompt face alignment.
//!
//! A transformer maps points on a shared 2D plane to landmark positions on a
//! face crop. Each annotation scheme owns a mean shape on that plane plus a
//! learnable per-landmark offset, so several schemes train one model and new
//! point sets can be queried without retraining.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod prompt;
pub mod train;

pub use error::{Result, TufaError};
