pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod inference;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
