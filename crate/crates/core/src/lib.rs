pub mod error;
pub mod eval;
pub mod geometry;
pub mod objectives;
pub mod projection;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
