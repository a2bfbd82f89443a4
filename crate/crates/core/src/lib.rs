pub mod alignment;
pub mod audio;
pub mod conditioning;
pub mod corpus;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod rng;
pub mod training;
pub mod vcmodel;

pub use error::{CdtError, Result};
