//! Doubly robust estimators for post-click conversion-rate prediction under
//! selection bias, with bias/variance theory checks, semi-synthetic data
//! generation, joint and tri-level training, and ranking evaluation.

pub mod datasets;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod experiment;
pub mod models;
pub mod rng;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
