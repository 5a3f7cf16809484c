//! Hard-negative mining for embedding-model fine-tuning.

pub mod analysis;
pub mod embed;
pub mod ensemble;
pub mod error;
pub mod fixtures;
pub mod mining;
#[cfg(feature = "mock-server")]
pub mod mock;
pub mod store;
pub mod sweep;
pub mod topk;

pub use error::{Error, Result};
