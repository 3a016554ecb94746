//! Numerical laboratory for limsup-set dimension machinery.
//!
//! The crate builds approximation systems on [0,1]^d, verifies the weak
//! redundancy (C1) and cube-density (C2) conditions, runs the nested
//! Cantor-set-with-measure construction that certifies Hausdorff dimension
//! lower bounds, and provides rate/dimension estimators plus a CLI to drive
//! reproducible experiments.

pub mod cantor;
pub mod cli;
pub mod conditions;
pub mod dimension;
pub mod errors;
pub mod farey;
pub mod geometry;
pub mod numeric;
pub mod rates;
pub mod systems;

pub use errors::LabError;
