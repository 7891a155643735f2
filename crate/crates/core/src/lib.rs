pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kd;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use task::TaskKind;
