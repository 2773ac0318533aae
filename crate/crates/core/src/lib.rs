pub mod action;
pub mod agent;
pub mod config;
pub mod dcs;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod reward;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
