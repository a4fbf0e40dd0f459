//! On-disk formats.

pub mod checkpoint;
pub mod dataset;
pub mod kv;
pub mod tnsr;
