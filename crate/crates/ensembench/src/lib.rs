//! File formats, experiment configs and the command runner on top of
//! `ensembench-core`.

mod error;

pub mod config;
pub mod formats;
pub mod results;
pub mod run;
pub mod suites;
pub mod svg;

pub use error::{Error, Result};
