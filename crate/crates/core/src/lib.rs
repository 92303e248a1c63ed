//! Structured channel pruning for ONNX models.
//!
//! The pipeline: load a model ([`onnx`]), lift it into a tripartite
//! computational graph ([`graph`]), discover coupled channels by mask
//! propagation ([`mask`]), partition them into groups ([`grouping`]), score
//! and select channels ([`importance`]), and structurally delete them
//! ([`surgeon`]). A reference interpreter ([`interpreter`]) provides forward
//! evaluation, calibration capture and BatchNorm recalibration, and the
//! [`obspa`] solver reconstructs surviving weights from per-layer Hessians so
//! pruned models keep their per-layer outputs without fine-tuning.

pub mod builder;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod grouping;
pub mod interpreter;
pub mod mask;
pub mod onnx;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
