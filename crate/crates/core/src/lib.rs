//! Persistent-transient duality network for multi-entity motion
//! prediction: a global relational recurrent channel over every entity,
//! egocentric per-human channels opened on demand by a learned switch,
//! and the data, training and evaluation tooling around them.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod persistent;
pub mod report;
pub mod scene;
pub mod switch;
pub mod synth;
pub mod train;
pub mod transient;

pub use error::{Error, Result};
