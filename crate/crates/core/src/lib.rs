pub mod adapters;
pub mod autograd;
pub mod backbone;
pub mod compositor;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompt;
pub mod scoring;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
