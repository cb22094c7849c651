//! Temporal action detection on 1-D feature sequences with a DETR-style
//! transformer whose self-attention is steered by guidance maps derived
//! from its own cross-attention.
//!
//! The crate is organized around the pipeline:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation (f64, dense).
//! - [`model`]: encoder/decoder transformer exposing all attention maps.
//! - [`feedback`]: guidance-map construction and the self-feedback losses.
//! - [`matching`]: Hungarian assignment and the detection objective.
//! - [`diversity`]: rank-collapse diagnostics for attention maps.
//! - [`data`]: synthetic datasets, feature files, windowing, resizing.
//! - [`eval`]: SoftNMS post-processing and mAP scoring.
//! - [`train`]: the optimization loop tying everything together.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod diversity;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod fileio;
pub mod matching;
pub mod model;
pub mod train;

pub use error::{Error, Result};
