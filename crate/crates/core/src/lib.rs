pub mod anchors;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
