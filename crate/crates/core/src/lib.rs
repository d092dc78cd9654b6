//! Semi-supervised crowd counting with density agents.

pub mod agency;
pub mod contrastive;
pub mod datasets;
pub mod error;
pub mod evalkit;
mod fsutil;
pub mod network;
pub mod regression_losses;
pub mod trainer;

pub use error::{Error, Result};
