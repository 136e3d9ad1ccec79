//! Synthesis and curation toolkit for multi-layer transparent images.
//!
//! Single layers are produced generate-then-matte against pluggable model
//! backends, composed by semantic layout, scored with a trainable preference
//! model, filtered for artifacts, and staged for human review.

pub mod attention;
pub mod backends;
pub mod compositor;
pub mod curation;
pub mod error;
#[doc(hidden)]
pub mod fixtures;
pub mod layer;
pub mod layerflux;
pub mod prompting;
pub mod review;
pub mod seed;
pub mod tips;

pub use error::{Error, Result};
