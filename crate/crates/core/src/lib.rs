//! Elastic weight-shared transformer for machine translation: one trained
//! SuperTransformer, latency-constrained SubTransformer search, and run-time
//! switching between pre-selected operating points without retraining.

pub mod artifacts;
pub mod autograd;
pub mod corpus;
pub mod design_space;
pub mod error;
pub mod latency;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod search;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
