//! Tri-branch fundus-image glaucoma screening pipeline.

pub mod archive;
pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod dwm;
pub mod model;
pub mod preprocess;
pub mod training;
pub mod error;
pub mod evaluation;
pub mod nn;

pub use error::{Error, Result};
