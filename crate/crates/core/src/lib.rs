//! Language-to-configuration search and goal-conditioned control on a
//! planar arm-and-cube world.

pub mod config;
pub mod dataset;
pub mod distill;
pub mod embedding;
pub mod env;
pub mod error;
pub mod goalgen;
pub mod nn;
pub mod par;
pub mod provider;
pub mod rl;

pub use error::{Error, Result};
