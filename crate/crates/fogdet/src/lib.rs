//! Object detection under fog: synthetic haze generation, a two-stage
//! detector with domain-adaptive training, and an evaluation harness.

pub mod adapt;
pub mod core;
pub mod detector;
pub mod error;
pub mod evalbench;
pub mod fogsynth;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod rng;

pub use error::{Error, Result};
