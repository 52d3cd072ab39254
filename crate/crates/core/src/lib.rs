pub mod compression;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod split;
pub mod training;
pub mod wire;

pub use error::{Error, Result};
