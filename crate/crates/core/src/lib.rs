//! Correlation-aware adapter for frozen, channel-independent forecasters.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod dce;
pub mod division;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod hpcl;
pub mod infer;
pub mod io;
pub mod optim;
pub mod params;

pub use error::{CoraError, Result};
