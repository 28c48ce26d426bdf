//! Reverse-mode differentiation for the compact networks used by the
//! latent filtering pipeline: dense and strided convolution layers, ReLU,
//! batch normalization, gated recurrent cells, plus SGD-family optimizers
//! and a flat float32 checkpoint format.

pub mod check;
pub mod conv;
pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod par;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{AdError, Result};
pub use graph::{wrap_angle, BatchStats, Graph, RowFunction, Var};
pub use layers::{BatchNorm, Conv2d, Dense, GruCell};
pub use optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
pub use par::ExecMode;
pub use params::{Binding, ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
