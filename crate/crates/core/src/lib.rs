pub mod ctc;
pub mod datagen;
pub mod decoder;
pub mod duration;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
