//! Majority-vote aggregation of multi-metric pairwise preferences feeding a
//! direct-preference-optimization loss over a toy conditional diffusion model.

pub mod aggregate;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod dpo;
pub mod error;
pub mod evalkit;
mod fsio;
pub mod pipeline;
pub mod prefcore;
pub mod rewards;
pub mod trainer;

pub use error::{Error, Result};
