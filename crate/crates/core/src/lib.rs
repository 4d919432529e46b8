//! Geometry-informed neural operator transformer.
//!
//! Boundary point clouds are encoded into a fixed set of geometry tokens
//! (farthest-point sampling, ball grouping, masked cross- and self-attention)
//! and a cross-attention decoder evaluates the solution field at arbitrary
//! query points. The crate also ships a Poisson dataset generator and the
//! padding-aware training loop.

pub mod error;
pub mod numerics;

pub use error::{GinotError, Result};
pub mod datagen;
pub mod extension;
pub mod geometry_encoder;
pub mod layers;
pub mod model;
pub mod pointcloud;
pub mod solution_decoder;
pub mod training;

pub use model::{Ginot, GinotConfig};
