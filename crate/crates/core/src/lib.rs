//! Skeleton-guided channel expansion for unpaired glyph-to-glyph translation.

pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod imgcore;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod sgce;
pub mod skeleton;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
