pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
