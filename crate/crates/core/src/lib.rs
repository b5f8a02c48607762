//! Ensembles trained with multiple choice learning objectives.
//!
//! The crate covers independent ensembles, stochastic MCL, confident MCL and
//! the auxiliary-class variant with memory-based assignment and a shared
//! feature fusion module, plus the evaluation metrics used to compare them.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod fusion;
pub mod model;
pub mod objective;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod checkpoint;
