//! Audio-visual depth estimation: echo simulation, synthetic scenes, the
//! echo/visual/material networks with attention-based fusion, and the
//! training and evaluation harness.

pub mod checkpoint;
pub mod dsp;
pub mod echo;
mod error;
pub mod experiments;
pub mod fusion;
pub mod kv;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod optim;
pub mod params;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
