pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod prototype;
pub mod sinkhorn;
pub mod training;

pub use error::{Error, Result};
