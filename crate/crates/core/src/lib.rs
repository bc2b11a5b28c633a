//! Model-based offline policy optimization with an adversarially trained
//! dynamics ensemble, plus exact tabular tools for checking the accompanying
//! return bound.

pub mod bound;
pub mod env;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod penalty;
pub mod rng;
pub mod sac;

pub use error::{MoanError, Result};
