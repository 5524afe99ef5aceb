pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod jpeg;
pub mod models;
pub mod nn;
pub mod postprocess;
pub mod scheduler;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
