//! Co-attention fusion of crystal graphs and device-layer text for
//! probabilistic power-conversion-efficiency regression.

pub mod coattention;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
