pub mod bench;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
