//! Federated semi-supervised learning simulator.

pub mod cli;
pub mod comm;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod federation;
pub mod helper_selection;
pub mod nn;
pub mod ssl;

pub use error::{Error, Result};
