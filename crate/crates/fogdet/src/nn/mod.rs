//! Minimal f64 neural-network stack: tape autodiff, parameter store,
//! initialization, and SGD.

pub mod init;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{ParamId, ParamKind, ParamSet};
pub use tape::{Gradients, RoiSpec, Tape, TensorId};
