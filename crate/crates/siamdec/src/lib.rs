//! Files, datasets, training runtime, evaluation reports and the command
//! line for the RGB-thermal Siamese decoder in `siamdec-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod runtime;
pub mod weights;

pub use error::{Error, Result};
