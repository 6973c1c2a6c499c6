pub mod checks;
pub mod data;
pub mod error;
pub mod fedcore;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
