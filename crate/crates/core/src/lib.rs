//! Topology-aware segmentation of corneal M-mode OCT frames.

pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod synthgen;
pub mod training;
pub mod types;

pub use error::{Error, Result};
