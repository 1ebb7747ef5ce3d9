//! Partial-label learning toolkit for multi-label physiological signals.

pub mod ambiguity;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod pll;
pub mod rng;
pub mod similarity;
pub mod synth;

pub use error::{CoreError, Result};
