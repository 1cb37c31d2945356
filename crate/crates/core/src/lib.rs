//! Recursive mosaic augmentation and progressive multi-stage interactive
//! training for fine-grained image classification on small stage-partitioned
//! CNNs.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod image;
pub mod model;
pub mod msi;
pub mod nn;
pub mod optim;
pub mod rmg;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
