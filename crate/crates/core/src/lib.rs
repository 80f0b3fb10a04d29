pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod nn;
pub mod plot;
pub mod sim;

pub use error::{Error, Result};
