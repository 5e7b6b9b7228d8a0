pub mod analytic_reference;
pub mod bootstrap;
pub mod campaign;
pub mod design_io;
pub mod designs;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod models;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
