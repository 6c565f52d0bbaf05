pub mod config;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod fusion;
pub mod math;
pub mod model;
pub mod nn;
pub mod private_branch;
pub mod shared_branch;
pub mod train;

pub use error::{Error, Result};
