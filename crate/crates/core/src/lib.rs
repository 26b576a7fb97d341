pub mod augment;
pub mod counter;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod io;
pub mod nn;
pub mod pairing;
pub mod par;
pub mod phantom;
pub mod raster;
pub mod rng;
pub mod segmentation;
pub mod simulator;
pub mod stitcher;
pub mod synthesis;

pub use error::{Error, Result};
