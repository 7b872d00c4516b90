//! Audio-visual segmentation of sounding objects with noise-resilient audio gating
//! and discriminative mutual cross-modal fusion.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine ([`tensor`]),
//! a log-mel audio frontend ([`audio`]), the segmentation network ([`model`]),
//! metrics, a synthetic audio-visual dataset and the training/evaluation harness.
//!
//! Everything numeric is generic over [`Scalar`]; training uses `f32` and gradient
//! checks replay graphs in `f64`.

pub mod ablate;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvSpec, Gradients, Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
