//! Single-machine simulator for personalised federated social-bot detection.

pub mod aggregate;
pub mod backbone;
pub mod client;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod orchestrator;
pub mod rl;
pub mod tensor;

pub use error::{Error, Result};
