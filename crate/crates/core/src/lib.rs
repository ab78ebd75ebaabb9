pub mod adapters;
mod codec;
pub mod config;
pub mod data;
pub mod emitter;
pub mod engine;
pub mod error;
pub mod model;
pub mod numeric;
pub mod train;

pub use error::{Error, FormatError, Result};
