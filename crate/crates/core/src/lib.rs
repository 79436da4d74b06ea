pub mod bev;
pub mod enhance;
pub mod error;
pub mod grad;
pub mod image;
pub mod io;
pub mod loss;
pub mod occlusion;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod sh;
pub mod synth;

pub use error::{Error, Result};
