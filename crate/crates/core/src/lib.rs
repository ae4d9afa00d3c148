//! Outsourced fixed-radius biometric identification over matrix-masked
//! templates.

pub mod attacks;
pub mod bench;
pub mod cli;
pub mod error;
pub mod matrix;
pub mod scheme;
pub mod store;

pub use error::{Error, Result};
