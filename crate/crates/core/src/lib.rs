//! Nighttime degradation synthesis, self-prior restorer training and
//! quality-gated teacher-student refinement.

pub mod augment;
pub mod error;
pub mod image;
pub mod iqa;
pub mod loss;
pub mod model;
pub mod optim;
pub mod refine;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, MetricError, Result};
pub use image::Image;
pub use rng::RngStream;
