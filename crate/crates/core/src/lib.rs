pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod lora;
pub mod model;
pub mod rng;
pub mod skill_router;
pub mod task_router;
pub mod train;

pub use error::{Error, Result};
