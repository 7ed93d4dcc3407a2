pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod ffc;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod seam;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
