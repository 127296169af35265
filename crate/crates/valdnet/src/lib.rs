//! Two-stream violence detection for short clips: appearance and motion
//! streams share a small convolutional backbone, a bidirectional recurrent
//! layer aggregates over time, and a sigmoid head scores the clip. Everything
//! runs on the CPU in f64 on top of a from-scratch reverse-mode tape.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod ppm;
pub mod optim;
pub mod recurrent;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Padding, Tape};
pub use tensor::Tensor;
pub use weights::{TapedParams, WeightStore};
