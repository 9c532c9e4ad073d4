//! Sketch-guided scene image generation.

pub mod backend;
pub mod cli;
pub mod compose;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod identity;
pub mod inference;
pub mod jobs;
pub mod objects;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod service;
pub mod store;

pub use error::{Error, Result};
