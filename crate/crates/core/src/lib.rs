pub mod config;
pub mod data;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gcomp;
pub mod gtransformer;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
