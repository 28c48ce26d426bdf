//! Tracking low-dimensional states from image sequences: benchmark
//! state-space models, dataset generation, EKF baselines in a learned
//! latent space, and a filter whose Kalman gain comes from a recurrent
//! network trained jointly with the image encoder.

pub mod data;
pub mod encoder;
pub mod error;
pub mod filters;
pub mod gainnet;
pub mod metrics;
pub mod pipeline;
pub mod ssm;

pub use error::{Error, Result};
