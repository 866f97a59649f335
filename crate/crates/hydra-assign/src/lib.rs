//! Hybrid one-to-one / one-to-many relation assignment for query-based scene
//! graph generation, exercised end to end on synthetic spatial-relation scenes.
//!
//! The crate bundles:
//! - a reverse-mode autodiff core ([`autodiff`]) sized for desk-scale models,
//! - box geometry and overlap kernels ([`geometry`]),
//! - an exact Hungarian solver and relation-triplet costs ([`matching`]),
//! - one-to-many assignment with threshold and top-k selection ([`o2m`]),
//! - focal/L1/GIoU losses and their hybrid composition ([`losses`]),
//! - a toy relation decoder with a parameter-shared, self-attention-free
//!   auxiliary branch ([`decoder`]),
//! - a deterministic synthetic scene generator ([`synthdata`]),
//! - scene-graph detection metrics ([`metrics`]) and training diagnostics
//!   ([`analysis`]),
//! - a reproducible CLI ([`cli`]) wiring everything together.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod o2m;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
