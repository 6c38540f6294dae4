//! Exchangeable sequence modeling toolkit: exact predictive models,
//! one-step and multi-step inference, information-gap diagnostics,
//! exchangeability checkers, decision simulators and a small transformer.

pub mod cli;
pub mod decisions;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod models;
pub mod numerics;
pub mod properties;
pub mod tinyformer;

pub use error::{Error, Result};
