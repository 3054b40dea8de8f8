//! Multi-task training engine for joint 7-class expression classification and
//! 12-unit action-unit detection from partially labeled face images.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
