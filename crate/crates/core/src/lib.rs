//! Generative modeling of antibody CDR loops as (distance matrix, sequence)
//! pairs: a two-phase normalizing flow with constraint learning, a
//! constrained distance-geometry solver turning generated distance matrices
//! into 3D alpha-carbon coordinates, and the evaluation-metric suite.

pub mod autodiff;
pub mod constraints;
pub mod data;
pub mod embed3d;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod metrics;
pub mod training;

pub use error::{Error, Result};



