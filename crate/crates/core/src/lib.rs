//! Online test-time adaptation for prototype-based zero-shot classifiers.

pub mod adapters;
pub mod binio;
pub mod classifier;
pub mod encoders;
pub mod error;
pub mod numerics;
pub mod prototypes;
pub mod streams;
pub mod harness;

pub use error::{Error, Result};
