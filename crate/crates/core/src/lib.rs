pub mod bench;
pub mod classifier;
pub mod config;
pub mod constraints;
pub mod controller;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod exploration;
pub mod persist;
pub mod solvers;
pub mod tuner;

pub use error::{Error, Result};
