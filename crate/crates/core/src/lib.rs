//! Training laboratory for dynamic architecture optimisation of a partitioned
//! CTC encoder: importance scoring of parameter groups during training and
//! budgeted grow-and-drop surgery.

pub mod ctc;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod scoring;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
