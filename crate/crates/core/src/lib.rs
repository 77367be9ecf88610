//! Learned compressive CSI feedback.
pub mod channelgen;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod l2o;
pub mod quantize;
pub mod ndtensor;
mod nn;
pub mod solvers;
pub mod transforms;
pub use error::{Error, Result};
