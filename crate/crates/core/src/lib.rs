//! Conceptor estimation, Boolean composition, spectral layer diagnostics and
//! activation steering over activation-bundle files.

pub mod boolean;
pub mod cli;
pub mod conceptor;
pub mod conceptor_file;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod linalg;
mod manifest;
pub mod steering;
pub mod store;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
