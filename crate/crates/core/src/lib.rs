//! Collaborative score distillation: SVGD-coupled score distillation and its
//! variance-reduced editing form, driven by pluggable epsilon-prediction
//! oracles.

pub mod bridge;
pub mod canvas;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod oracle;
pub mod schedule;
pub mod seed;
pub mod svgd;
pub mod toy;

pub use error::{CsdError, Result};
