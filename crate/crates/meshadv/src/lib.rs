pub mod attack;
pub mod error;
mod io_util;
pub mod mesh;
pub mod morphable;
pub mod recognition;
pub mod render;
pub mod rng;
pub use error::{Error, Result};
