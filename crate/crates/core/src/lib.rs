//! Exact and pooled memory cross-attention for video-tracking memory banks.
//!
//! The crate provides a small deterministic `f64` matrix substrate
//! ([`tensor`]), the attention kernels and pooling machinery
//! ([`attention`]), a pre-norm memory-attention block ([`memory`]),
//! seeded smooth/random token generators ([`synthetic`]), error and FLOP
//! analysis ([`analysis`]) and a binary token-dump format ([`tokens`]).

pub mod analysis;
pub mod attention;
pub mod error;
pub mod memory;
pub mod synthetic;
pub mod tensor;
pub mod tokens;

pub use error::{AttnError, Result};
pub use tensor::TokenMatrix;
