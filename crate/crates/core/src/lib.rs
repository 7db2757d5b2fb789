//! Multi-temporal calving-front segmentation at desk scale.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod front;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod synth;
pub mod temporal;
pub mod train;
pub mod zones;

pub use error::{Error, Result};
