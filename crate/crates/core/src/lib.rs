//! Faster R-CNN style white-blood-cell detector and counter, built on a
//! small self-contained tensor library.

pub mod boxes;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod model;
pub mod render;
pub mod rpn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
