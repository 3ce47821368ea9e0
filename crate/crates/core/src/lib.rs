//! Functional model and cycle-level simulator of a systolic-scan Vision Mamba
//! accelerator.

pub mod cli;
pub mod error;
pub mod numerics;
pub mod perf;
pub mod quant;
pub mod sfu;
pub mod ssa;
pub mod ssm;

pub use error::{Error, Result};
