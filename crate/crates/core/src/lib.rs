pub mod alignment;
pub mod config;
pub mod data;
pub mod dpp;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stripe;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
pub use trajectory::Trajectory;
