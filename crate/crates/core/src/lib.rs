//! Monte-Carlo diffusion in periodic packings of permeable spheres, PGSE
//! signal synthesis, and impermeable / exchange-aware compartment models
//! with bounded multi-start fitting.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod engine;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod models;
pub mod par;
pub mod sequence;
pub mod substrate;

pub use error::{Error, Result};
pub use geometry::Vec3;
pub use par::Execution;
