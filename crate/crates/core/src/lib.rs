//! Privatization of image-based case explanations and measurement of the
//! resulting privacy / explanatory-evidence trade-off.

pub mod cli;
pub mod diffcore;
pub mod evaluate;
pub mod error;

pub use error::{Error, Result};
pub mod dataset;
pub mod imaging;
pub mod pprlvgan;
pub mod privatize;
pub mod rng;
