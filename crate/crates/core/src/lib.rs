pub mod bootstrap;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod seed;

pub use error::{Error, Result};
