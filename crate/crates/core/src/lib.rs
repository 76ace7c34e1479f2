pub mod autograd;
pub mod config;
pub mod error;
pub mod io;
pub mod neighborhood;
pub mod objective;
pub mod partition;
pub mod priornet;
pub mod raster;
pub mod report;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
