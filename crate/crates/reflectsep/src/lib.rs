//! File formats, training runs and the `reflectsep` command line on top of
//! `reflectsep-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fit;
pub mod io;
pub mod panels;

pub use error::{Error, ExitStatus, Result};
