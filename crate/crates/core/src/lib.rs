//! Shadow removal by retinex decomposition, masked diffusion over the
//! illumination layer, and illumination-guided texture restoration.

pub mod augment;
pub mod checkpoint;
pub mod color;
pub mod dataset;
pub mod decomposition;
pub mod error;
pub mod igtr;
pub mod image;
pub mod llc;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod restoration;
pub mod synth;

pub use error::{Error, Result};
