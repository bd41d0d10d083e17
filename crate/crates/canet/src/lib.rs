//! Chained context aggregation network for semantic segmentation.
//!
//! Everything is self-contained: a rank-4 f64 tensor core with reverse-mode
//! differentiation, a dilated residual encoder, the chained context
//! aggregation module with its feature selection attention, an asymmetric
//! decoder, joint-loss training with SGD and a poly schedule, confusion-matrix
//! metrics, a synthetic shape dataset, and test-time multi-scale/flip
//! inference.

pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runtime;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
