pub mod backbone;
pub mod data;
pub mod error;
pub mod geometry;
pub mod hierarchy;
pub mod kv;
pub mod loss_metrics;
pub mod model;
pub mod ndcore;
pub mod raster;
pub mod superpixel;
pub mod trainer;

pub use error::{Error, Result};
