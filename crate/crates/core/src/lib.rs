pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod lora;
pub mod numerics;
pub mod recdata;
pub mod training;
pub mod xcross;

pub use error::{Error, Result};
