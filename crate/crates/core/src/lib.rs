//! Online test-time training with a rotation-prediction auxiliary task,
//! poisoning streams that induce forgetting in it, and gradient-correlation
//! probes.

pub mod attacks;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod training;

pub use error::{Error, Result};
