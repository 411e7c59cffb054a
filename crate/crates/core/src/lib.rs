//! K-step entity scoring heads for knowledge-graph completion.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod kgdata;
pub mod konhead;
pub mod ndops;
pub mod objectives;

pub use error::{KonError, Result};
