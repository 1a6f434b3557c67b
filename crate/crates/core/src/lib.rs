//! Prompt sensitivity, calibration and selective-prediction measurement for
//! black-box text classifiers, plus a dual-objective prompt optimizer.

pub mod analysis;
pub mod backend;
pub mod conformal;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod hashing;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod par;
pub mod paraphrase;
pub mod synthetic;

pub use error::{Error, Result};
