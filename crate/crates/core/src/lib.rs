//! HGNET: hierarchical feature-guided prediction of future occupancy grids
//! and backward flow fields at desk scale.
//!
//! The crate bundles a synthetic scene generator, the model (context
//! encoder, shifted-window visual encoder, feature-guided attention decoder
//! with a recurrent time-series memory), training objectives, benchmark
//! metrics and a CLI harness. All tensor math runs on a small tape-based
//! autodiff engine over `ndarray`, which keeps gradients finite-difference
//! checkable and runs fully deterministically for a fixed seed.

pub mod checkpoint;
pub mod config;
pub mod context;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod features;
pub mod fgat;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod render;
pub mod scenegen;
pub mod train;
pub mod visual;

pub use error::{HgError, Result};
