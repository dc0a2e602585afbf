//! Memory-augmented spectral graph convolution for paired brain-connectivity
//! classification.
//!
//! The crate trains a matching network over pairs of acquisitions. Each
//! acquisition couples an ROI-by-ROI connectivity matrix with a timestamped
//! clinical sequence. Connectivity rows are filtered by Chebyshev-polynomial
//! graph convolutions on a shared spatial ROI graph, clinical sequences are
//! read through a two-embedding memory with per-ROI attention, and the two
//! modalities are fused over multiple hops. Pairs are scored by inner-product
//! or bilinear matching and classified as same-group / different-group.
//!
//! Everything is plain `f64` with hand-written forward and backward passes;
//! a central-difference harness ([`numerics::grad_check`]) verifies every
//! analytic gradient.

pub mod chebnet;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod matching;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Mat;
