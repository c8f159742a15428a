//! Gradient inversion by training-free search over over-parameterized
//! image decoders.

pub mod error;
pub mod tensor;
pub mod victim;
pub mod defense;
pub mod nas;
pub mod search;
pub mod recovery;
pub mod metrics;
pub mod data;
pub mod gradcheck;
pub mod harness;

pub use error::{Error, Result};
