//! Sub-center additive angular margin training and embedding diagnostics.

pub mod error;
pub mod loss;

pub use error::{Error, Result};
pub mod corpus;
pub mod encoder;
pub mod experiment;
pub mod metrics;
pub mod train;
