//! DEER: a detection-agnostic end-to-end scene-text spotter.
//!
//! A convolutional backbone feeds multi-scale tokens to a deformable
//! encoder. A differentiable-binarization location head finds text regions
//! whose centres become reference points, and an autoregressive decoder reads
//! the text around each reference point.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{DeerError, Result};
