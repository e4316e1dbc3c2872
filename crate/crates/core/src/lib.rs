//! Masked-representation pretraining of a decoupled transformer encoder on
//! sliced actigraphy series, fused with demographics through bounded
//! per-feature attention for binary physical-fitness classification.

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod metrics;
pub mod numeric;
pub mod pretrain;
pub mod slicing;
pub mod sra;

pub use error::{Error, ExclusionReason, Result};
