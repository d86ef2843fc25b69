//! Quantization error feedback for distributed graph filters.

pub mod atc;
pub mod cli;
pub mod design;
pub mod error;
pub mod filters;
pub mod gramians;
pub mod graphs;
pub mod linalg;
pub mod qef;
pub mod quant;
pub mod sim;

pub use error::{Error, Result};
