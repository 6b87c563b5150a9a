//! Compiler and cycle-accurate simulator for a structured-sparse DNN
//! inference accelerator.
//!
//! The pipeline compresses network layers into permuted block-diagonal form,
//! statically schedules activation routing over an output-multiplexed
//! crossbar, maps layers onto a parameterized PE array, simulates execution
//! bit- and cycle-accurately, and prices designs with an analytic
//! energy/area model.

pub mod baseline;
pub mod compress;
pub mod costmodel;
pub mod error;
pub mod eval;
pub mod format;
pub mod mapper;
pub mod model;
pub mod pruner;
pub mod quant;
pub mod scheduler;
pub mod simulator;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
