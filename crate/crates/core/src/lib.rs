//! Conditional cross-attention for DETR-style set-prediction detection,
//! built on a small reverse-mode autodiff engine.

pub mod attention;
pub mod boxes;
pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod decoder;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod positional;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{SceneConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Detector;
pub use tensor::{Graph, Tensor, Var};
