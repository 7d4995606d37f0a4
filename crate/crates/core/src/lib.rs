//! Normalized matrix attention for point-cloud surface reconstruction.

pub mod attention;
pub mod checks;
pub mod diffcore;
mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod spatial;

pub use error::{Error, Result};

#[cfg(test)]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
