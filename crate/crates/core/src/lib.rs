//! Simulation engine for comparing analysis methods in randomized trials whose
//! outcomes are recorded at irregular, intervention-dependent times.

pub mod cli;
pub mod cohort;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod spline;

pub use error::{Error, Result};
