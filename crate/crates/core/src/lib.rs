pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod nn;
pub mod snake;
pub mod tensor;

pub use error::{Error, Result};
