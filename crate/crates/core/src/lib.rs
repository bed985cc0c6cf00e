//! Competing and semi-competing risks survival analysis: nonparametric
//! estimators, statistical, boosted and neural models, and the evaluation
//! harness used to compare them.

pub mod cohort;
pub mod deep;
pub mod design;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod explain;
pub mod gbm;
pub mod grid;
pub mod hpo;
pub mod linear;
pub mod models;
pub mod simulate;

pub use error::{CoreError, ErrorClass, Result};
pub use grid::{project_cif, CifCurve, TimeGrid};
